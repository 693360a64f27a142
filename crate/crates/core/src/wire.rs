//! SLAP messages and their line encoding.
//!
//! A message encodes to one line of JSON: an object whose `kind` field names
//! the message and whose other fields are the kind-specific payload. The same
//! bytes are used for in-process calls, the socket listener and trace files.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::{AccessRequest, Decision};
use crate::model::{InstallStatus, Lifecycle, Parameters, RequestedState, Tick};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    Install {
        release_url: String,
    },
    Deploy {
        instance_id: String,
        release_url: String,
        instance_type: String,
        partition_index: u32,
        slapparameters: Parameters,
        #[serde(default)]
        ipv6: String,
        #[serde(default)]
        ipv4: String,
    },
    Stop {
        instance_id: String,
        partition_index: u32,
    },
    Destroy {
        instance_id: String,
        partition_index: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance_id: String,
    pub lifecycle: Lifecycle,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub connection: Parameters,
}

/// What a requester learns about its instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceView {
    pub instance_id: String,
    pub reference: String,
    pub lifecycle: Lifecycle,
    pub node_id: Option<String>,
    pub partition_index: Option<u32>,
    #[serde(default)]
    pub connection: Parameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccountingEdge {
    Open,
    Close,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Authentication,
    UnknownNode,
    Consistency,
    Capacity,
    BadRequest,
    UnknownClient,
    Rejected,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub wu_id: String,
    pub app_name: String,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SlapMessage {
    RegisterNode {
        node_id: String,
        credentials: String,
        partition_count: u32,
    },
    Supply {
        node_id: String,
        release_url: String,
    },
    RequestInstance {
        requester: String,
        reference: String,
        release_url: String,
        instance_type: String,
        #[serde(default)]
        slapparameters: Parameters,
        #[serde(default)]
        sla_node: Option<String>,
        #[serde(default)]
        state: RequestedState,
    },
    GetTasks {
        node_id: String,
        tick: Tick,
    },
    TaskList {
        node_id: String,
        tasks: Vec<Task>,
    },
    ReportState {
        node_id: String,
        tick: Tick,
        states: Vec<InstanceReport>,
    },
    ReportInstall {
        node_id: String,
        tick: Tick,
        release_url: String,
        status: InstallStatus,
    },
    AccountingEvent {
        requester: String,
        instance_id: String,
        edge: AccountingEdge,
        tick: Tick,
        rate: u64,
    },
    Ack {
        identity: String,
    },
    Error {
        identity: String,
        code: ErrorCode,
        message: String,
    },
    InstanceStatus {
        requester: String,
        instance: InstanceView,
    },
    Attach {
        client_id: String,
        server_url: String,
        account_key: String,
        platform: String,
    },
    FetchWork {
        client_id: String,
        server_url: String,
        platform: String,
    },
    WorkAssignment {
        client_id: String,
        work: Option<WorkItem>,
    },
    ReportResult {
        client_id: String,
        server_url: String,
        wu_id: String,
        output: String,
        /// Set when the client could not process the work unit.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    AccessCheck {
        identity: String,
        request: AccessRequest,
        decision: Decision,
    },
    PlanPart {
        origin: String,
        name: String,
        recipe: String,
        options: BTreeMap<String, String>,
    },
}

pub const KINDS: [&str; 17] = [
    "RegisterNode",
    "Supply",
    "RequestInstance",
    "GetTasks",
    "TaskList",
    "ReportState",
    "ReportInstall",
    "AccountingEvent",
    "Ack",
    "Error",
    "InstanceStatus",
    "Attach",
    "FetchWork",
    "WorkAssignment",
    "ReportResult",
    "AccessCheck",
    "PlanPart",
];

impl SlapMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            SlapMessage::RegisterNode { .. } => "RegisterNode",
            SlapMessage::Supply { .. } => "Supply",
            SlapMessage::RequestInstance { .. } => "RequestInstance",
            SlapMessage::GetTasks { .. } => "GetTasks",
            SlapMessage::TaskList { .. } => "TaskList",
            SlapMessage::ReportState { .. } => "ReportState",
            SlapMessage::ReportInstall { .. } => "ReportInstall",
            SlapMessage::AccountingEvent { .. } => "AccountingEvent",
            SlapMessage::Ack { .. } => "Ack",
            SlapMessage::Error { .. } => "Error",
            SlapMessage::InstanceStatus { .. } => "InstanceStatus",
            SlapMessage::Attach { .. } => "Attach",
            SlapMessage::FetchWork { .. } => "FetchWork",
            SlapMessage::WorkAssignment { .. } => "WorkAssignment",
            SlapMessage::ReportResult { .. } => "ReportResult",
            SlapMessage::AccessCheck { .. } => "AccessCheck",
            SlapMessage::PlanPart { .. } => "PlanPart",
        }
    }

    /// The node, requester or client the message speaks for.
    pub fn identity(&self) -> &str {
        match self {
            SlapMessage::RegisterNode { node_id, .. }
            | SlapMessage::Supply { node_id, .. }
            | SlapMessage::GetTasks { node_id, .. }
            | SlapMessage::TaskList { node_id, .. }
            | SlapMessage::ReportState { node_id, .. }
            | SlapMessage::ReportInstall { node_id, .. } => node_id,
            SlapMessage::RequestInstance { requester, .. }
            | SlapMessage::AccountingEvent { requester, .. }
            | SlapMessage::InstanceStatus { requester, .. } => requester,
            SlapMessage::Ack { identity } | SlapMessage::Error { identity, .. } | SlapMessage::AccessCheck { identity, .. } => {
                identity
            }
            SlapMessage::Attach { client_id, .. }
            | SlapMessage::FetchWork { client_id, .. }
            | SlapMessage::WorkAssignment { client_id, .. }
            | SlapMessage::ReportResult { client_id, .. } => client_id,
            SlapMessage::PlanPart { origin, .. } => origin,
        }
    }

    pub fn error(identity: &str, code: ErrorCode, message: impl Into<String>) -> Self {
        SlapMessage::Error { identity: identity.to_string(), code, message: message.into() }
    }

    pub fn ack(identity: &str) -> Self {
        SlapMessage::Ack { identity: identity.to_string() }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed message: truncated input")]
    Truncated,
    #[error("malformed message: unknown kind `{0}`")]
    UnknownKind(String),
    #[error("malformed message: {0}")]
    Malformed(String),
}

/// Encodes to a single line (no trailing newline).
pub fn encode_message(msg: &SlapMessage) -> Vec<u8> {
    serde_json::to_vec(msg).expect("message types serialize infallibly")
}

pub fn encode_line(msg: &SlapMessage) -> String {
    String::from_utf8(encode_message(msg)).expect("json is utf-8")
}

pub fn decode_message(bytes: &[u8]) -> Result<SlapMessage, WireError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| {
        if e.is_eof() {
            WireError::Truncated
        } else {
            WireError::Malformed(e.to_string())
        }
    })?;
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| WireError::Malformed("missing `kind`".into()))?;
    if !KINDS.contains(&kind) {
        return Err(WireError::UnknownKind(kind.to_string()));
    }
    serde_json::from_value(value).map_err(|e| WireError::Malformed(e.to_string()))
}

/// Ordered record of encoded messages, one line each.
#[derive(Debug, Default)]
pub struct Trace {
    lines: RefCell<Vec<String>>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn record(&self, msg: &SlapMessage) {
        self.lines.borrow_mut().push(encode_line(msg));
    }

    pub fn record_bytes(&self, bytes: &[u8]) {
        self.lines.borrow_mut().push(String::from_utf8_lossy(bytes).into_owned());
    }

    pub fn len(&self) -> usize {
        self.lines.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.borrow().is_empty()
    }

    pub fn lines(&self) -> Vec<String> {
        self.lines.borrow().clone()
    }

    pub fn into_lines(self) -> Vec<String> {
        self.lines.into_inner()
    }

    /// The trace file body: every line newline-terminated.
    pub fn render(&self) -> String {
        self.lines.borrow().iter().map(|l| format!("{l}\n")).collect()
    }
}
