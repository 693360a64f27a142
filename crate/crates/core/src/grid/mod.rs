//! Desktop-grid workload: BOINC-like projects with application versions and
//! work units, the recipes that deploy them, and the server side of the
//! client exchange.

mod recipes;

pub use recipes::{BoincAppRecipe, BoincClientRecipe, BoincServerRecipe};

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Tick;
use crate::wire::{ErrorCode, SlapMessage, WorkItem};

pub const DISPATCH_TIMEOUT: Tick = 10;
pub const ADMIN_ACCOUNT: &str = "admin";

/// Application names with a built-in computation.
pub const KNOWN_APPS: [&str; 2] = ["upper_case", "reverse"];

pub fn compute_upper_case(input: &str) -> String {
    input.to_ascii_uppercase()
}

pub fn compute_reverse(input: &str) -> String {
    input.chars().rev().collect()
}

/// Runs application `app` on `input`; unknown applications yield nothing.
pub fn compute(app: &str, input: &str) -> Option<String> {
    match app {
        "upper_case" => Some(compute_upper_case(input)),
        "reverse" => Some(compute_reverse(input)),
        _ => None,
    }
}

pub fn project_url(ipv6: &str, project: &str) -> String {
    format!("http://[{ipv6}]/{project}")
}

pub fn account_key(url: &str, account: &str) -> String {
    let digest = Sha256::digest(format!("{url}\n{account}").as_bytes());
    hex::encode(&digest[..16])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("unknown client `{0}`")]
    UnknownClient(String),
    #[error("bad account key for `{0}`")]
    BadKey(String),
    #[error("unknown work unit `{0}`")]
    UnknownWorkUnit(String),
    #[error("unknown application `{0}`")]
    UnknownApp(String),
    #[error("application `{app}` is already deployed by part `{part}`")]
    DuplicateApp { app: String, part: String },
    #[error("result for `{wu_id}` rejected: {reason}")]
    Rejected { wu_id: String, reason: String },
    #[error("no project at `{0}`")]
    NoProject(String),
}

impl GridError {
    pub fn code(&self) -> ErrorCode {
        match self {
            GridError::UnknownClient(_) => ErrorCode::UnknownClient,
            GridError::BadKey(_) => ErrorCode::Authentication,
            GridError::NoProject(_) => ErrorCode::Unavailable,
            _ => ErrorCode::Rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppVersion {
    pub app_name: String,
    pub version: String,
    pub platform: String,
    pub exec_extension: String,
    pub binary: String,
    pub template_result: String,
    pub template_wu: String,
    pub dash: String,
    pub wu_name: String,
    /// Part that deployed this application.
    pub part: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WuStatus {
    Unsent,
    InProgress,
    Done,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub wu_id: String,
    pub app_name: String,
    pub input: String,
    pub status: WuStatus,
    pub assigned_to: Option<String>,
    pub deadline: Option<Tick>,
    /// Opaque template and input references.
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridResult {
    pub wu_id: String,
    pub output: String,
    pub client_id: String,
    pub tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Project {
    pub project_name: String,
    pub db_name: String,
    pub url: String,
    pub partition_root: String,
    pub directory: String,
    pub account_keys: BTreeMap<String, String>,
    pub apps: IndexMap<String, AppVersion>,
    pub wu_store: IndexMap<String, WorkUnit>,
    pub results: BTreeMap<String, GridResult>,
    /// Attached clients and their platform.
    pub clients: BTreeMap<String, String>,
    pub timeout: Tick,
    /// Log lines for the server service to flush.
    #[serde(default)]
    pub events: Vec<String>,
}

impl Project {
    pub fn new(project_name: &str, db_name: &str, url: &str, partition_root: &str, directory: &str) -> Self {
        Project {
            project_name: project_name.to_string(),
            db_name: db_name.to_string(),
            url: url.to_string(),
            partition_root: partition_root.to_string(),
            directory: directory.to_string(),
            account_keys: BTreeMap::from([(ADMIN_ACCOUNT.to_string(), account_key(url, ADMIN_ACCOUNT))]),
            apps: IndexMap::new(),
            wu_store: IndexMap::new(),
            results: BTreeMap::new(),
            clients: BTreeMap::new(),
            timeout: DISPATCH_TIMEOUT,
            events: Vec::new(),
        }
    }

    pub fn admin_key(&self) -> &str {
        &self.account_keys[ADMIN_ACCOUNT]
    }

    /// Registers or updates an application. Returns whether anything changed.
    pub fn add_app(&mut self, app: AppVersion) -> Result<bool, GridError> {
        match self.apps.get_mut(&app.app_name) {
            Some(existing) if existing.part != app.part => {
                Err(GridError::DuplicateApp { app: app.app_name, part: existing.part.clone() })
            }
            Some(existing) if *existing == app => Ok(false),
            Some(existing) => {
                *existing = app;
                Ok(true)
            }
            None => {
                self.apps.insert(app.app_name.clone(), app);
                Ok(true)
            }
        }
    }

    /// Makes sure work units `<wu_name>_0 .. <wu_name>_<count-1>` exist for
    /// `app`. Returns the ids created.
    pub fn ensure_work_units(
        &mut self,
        app: &str,
        wu_name: &str,
        count: u32,
        input: &str,
        metadata: &BTreeMap<String, String>,
    ) -> Result<Vec<String>, GridError> {
        if !self.apps.contains_key(app) {
            return Err(GridError::UnknownApp(app.to_string()));
        }
        let mut created = Vec::new();
        for i in 0..count {
            let wu_id = format!("{wu_name}_{i}");
            if !self.wu_store.contains_key(&wu_id) {
                self.insert_work_unit(&wu_id, app, input, metadata);
                created.push(wu_id);
            }
        }
        Ok(created)
    }

    /// Appends `count` new work units after the highest existing index.
    pub fn inject(&mut self, app: &str, input: &str, count: u32) -> Result<Vec<String>, GridError> {
        let wu_name = self.apps.get(app).ok_or_else(|| GridError::UnknownApp(app.to_string()))?.wu_name.clone();
        let prefix = format!("{wu_name}_");
        let next = self
            .wu_store
            .keys()
            .filter_map(|id| id.strip_prefix(&prefix)?.parse::<u32>().ok())
            .max()
            .map_or(0, |m| m + 1);
        let metadata = BTreeMap::from([("injected".to_string(), "true".to_string())]);
        let ids: Vec<String> = (next..next + count).map(|i| format!("{wu_name}_{i}")).collect();
        for id in &ids {
            self.insert_work_unit(id, app, input, &metadata);
        }
        Ok(ids)
    }

    fn insert_work_unit(&mut self, wu_id: &str, app: &str, input: &str, metadata: &BTreeMap<String, String>) {
        self.wu_store.insert(
            wu_id.to_string(),
            WorkUnit {
                wu_id: wu_id.to_string(),
                app_name: app.to_string(),
                input: input.to_string(),
                status: WuStatus::Unsent,
                assigned_to: None,
                deadline: None,
                metadata: metadata.clone(),
            },
        );
    }

    pub fn attach(&mut self, client_id: &str, key: &str, platform: &str) -> Result<(), GridError> {
        if !self.account_keys.values().any(|k| k == key) {
            return Err(GridError::BadKey(client_id.to_string()));
        }
        if self.clients.insert(client_id.to_string(), platform.to_string()).is_none() {
            self.events.push(format!("attach {client_id} {platform}"));
        }
        Ok(())
    }

    /// Returns in-progress work units whose deadline has passed to the queue.
    pub fn expire(&mut self, now: Tick) -> Vec<String> {
        let mut expired = Vec::new();
        for wu in self.wu_store.values_mut() {
            if wu.status == WuStatus::InProgress && wu.deadline.is_some_and(|d| now > d) {
                wu.status = WuStatus::Unsent;
                wu.assigned_to = None;
                wu.deadline = None;
                expired.push(wu.wu_id.clone());
            }
        }
        for id in &expired {
            self.events.push(format!("timeout {id}"));
        }
        expired
    }

    /// Hands the oldest unsent work unit whose application matches
    /// `platform` to `client_id`.
    pub fn dispatch(&mut self, client_id: &str, platform: &str, now: Tick) -> Result<Option<WorkItem>, GridError> {
        if !self.clients.contains_key(client_id) {
            return Err(GridError::UnknownClient(client_id.to_string()));
        }
        self.expire(now);
        let apps = &self.apps;
        let Some(wu) = self.wu_store.values_mut().find(|wu| {
            wu.status == WuStatus::Unsent && apps.get(&wu.app_name).is_some_and(|a| a.platform == platform)
        }) else {
            return Ok(None);
        };
        wu.status = WuStatus::InProgress;
        wu.assigned_to = Some(client_id.to_string());
        wu.deadline = Some(now + self.timeout);
        let item = WorkItem { wu_id: wu.wu_id.clone(), app_name: wu.app_name.clone(), input: wu.input.clone() };
        self.events.push(format!("dispatch {} {client_id}", item.wu_id));
        Ok(Some(item))
    }

    fn assigned(&mut self, wu_id: &str, client_id: &str) -> Result<&mut WorkUnit, GridError> {
        let wu = self.wu_store.get_mut(wu_id).ok_or_else(|| GridError::UnknownWorkUnit(wu_id.to_string()))?;
        let reason = if wu.status != WuStatus::InProgress {
            Some(format!("work unit is {:?}", wu.status).to_lowercase())
        } else if wu.assigned_to.as_deref() != Some(client_id) {
            Some(format!("{client_id} is not the assignee"))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(GridError::Rejected { wu_id: wu_id.to_string(), reason }),
            None => Ok(wu),
        }
    }

    /// Accepts a result from the assignee of an in-progress work unit.
    pub fn report_result(&mut self, wu_id: &str, output: &str, client_id: &str, now: Tick) -> Result<(), GridError> {
        self.assigned(wu_id, client_id)?.status = WuStatus::Done;
        self.results.insert(
            wu_id.to_string(),
            GridResult { wu_id: wu_id.to_string(), output: output.to_string(), client_id: client_id.to_string(), tick: now },
        );
        self.events.push(format!("result {wu_id} {client_id}"));
        Ok(())
    }

    /// The assignee could not process the work unit.
    pub fn report_error(&mut self, wu_id: &str, message: &str, client_id: &str) -> Result<(), GridError> {
        self.assigned(wu_id, client_id)?.status = WuStatus::Error;
        self.events.push(format!("error {wu_id} {client_id}: {message}"));
        Ok(())
    }

    pub fn count(&self, status: WuStatus) -> usize {
        self.wu_store.values().filter(|wu| wu.status == status).count()
    }

    pub fn all_done(&self) -> bool {
        self.wu_store.values().all(|wu| wu.status == WuStatus::Done)
    }
}

/// Projects served by the partitions of one node, by URL.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridHost {
    pub projects: BTreeMap<String, Project>,
}

impl GridHost {
    pub fn serves(&self, url: &str) -> bool {
        self.projects.contains_key(url)
    }

    pub fn project(&self, url: &str) -> Option<&Project> {
        self.projects.get(url)
    }

    pub fn project_in(&self, partition_root: &str) -> Option<&Project> {
        self.projects.values().find(|p| p.partition_root == partition_root)
    }

    pub fn project_in_mut(&mut self, partition_root: &str) -> Option<&mut Project> {
        self.projects.values_mut().find(|p| p.partition_root == partition_root)
    }

    pub fn remove_partition(&mut self, partition_root: &str) {
        self.projects.retain(|_, p| p.partition_root != partition_root);
    }

    /// Server side of the client exchange.
    pub fn handle(&mut self, msg: &SlapMessage, now: Tick) -> SlapMessage {
        let identity = msg.identity().to_string();
        let result = match msg {
            SlapMessage::Attach { client_id, server_url, account_key, platform } => self
                .project_mut(server_url)
                .and_then(|p| p.attach(client_id, account_key, platform))
                .map(|()| SlapMessage::ack(client_id)),
            SlapMessage::FetchWork { client_id, server_url, platform } => self
                .project_mut(server_url)
                .and_then(|p| p.dispatch(client_id, platform, now))
                .map(|work| SlapMessage::WorkAssignment { client_id: client_id.clone(), work }),
            SlapMessage::ReportResult { client_id, server_url, wu_id, output, error } => {
                self.project_mut(server_url).and_then(|p| match error {
                    Some(message) => p.report_error(wu_id, message, client_id),
                    None => p.report_result(wu_id, output, client_id, now),
                })
                .map(|()| SlapMessage::ack(client_id))
            }
            other => {
                return SlapMessage::error(&identity, ErrorCode::BadRequest, format!("{} is not a grid message", other.kind()))
            }
        };
        result.unwrap_or_else(|e| SlapMessage::error(&identity, e.code(), e.to_string()))
    }

    fn project_mut(&mut self, url: &str) -> Result<&mut Project, GridError> {
        self.projects.get_mut(url).ok_or_else(|| GridError::NoProject(url.to_string()))
    }
}

/// Carries grid messages to servers on other nodes.
pub trait GridTransport {
    fn call(&mut self, msg: &SlapMessage, now: Tick) -> SlapMessage;
}

/// Transport for a node with no reachable peers.
pub struct NoPeers;

impl GridTransport for NoPeers {
    fn call(&mut self, msg: &SlapMessage, _now: Tick) -> SlapMessage {
        SlapMessage::error(msg.identity(), ErrorCode::Unavailable, "no route to server")
    }
}
