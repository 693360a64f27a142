//! Simulated type-enforcement layer.
//!
//! Decisions compose a discretionary layer (owner, root, world bits) with a
//! mandatory layer driven by [`Policy`]. The mandatory layer binds root too.

mod fuzz;
mod labeling;
mod policy;

pub use fuzz::{cross_partition_requests, run_cross_partition_fuzz, FuzzOutcome};
pub use labeling::{label_path, Labeling, ObjectContext};
pub use policy::{
    generate_agent_policy, generate_partition_policy, parse_policy, partition_object_label, partition_subject_label, path_within,
    serialize_policy, set_mode, AllowRule, Mode, ObjectClass, Permission, Policy, PolicyError, AGENT_SUBJECT,
    BASE_LABEL, SOFTWARE_LABEL,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Tick, ROOT_IDENTITY};

/// What an access targets: a filesystem path, or a subject domain for
/// process transitions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessObject {
    Path(String),
    Domain(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub subject: String,
    /// Unix-like identity feeding the discretionary layer.
    pub identity: String,
    pub object: AccessObject,
    pub class: ObjectClass,
    pub permission: Permission,
    pub tick: Tick,
}

impl AccessRequest {
    pub fn path(
        subject: &str,
        identity: &str,
        path: &str,
        class: ObjectClass,
        permission: Permission,
        tick: Tick,
    ) -> Self {
        AccessRequest {
            subject: subject.to_string(),
            identity: identity.to_string(),
            object: AccessObject::Path(path.to_string()),
            class,
            permission,
            tick,
        }
    }

    pub fn transition(subject: &str, identity: &str, domain: &str, tick: Tick) -> Self {
        AccessRequest {
            subject: subject.to_string(),
            identity: identity.to_string(),
            object: AccessObject::Domain(domain.to_string()),
            class: ObjectClass::Process,
            permission: Permission::Transition,
            tick,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    Dac,
    NoMatchingRule,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "reason")]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_allow(self) -> bool {
        self == Decision::Allow
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub request: AccessRequest,
    pub object_label: Option<String>,
    pub decision: Decision,
    pub mac_consulted: bool,
    pub matched_rule: Option<AllowRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("access denied ({reason:?}): {subject} as {identity} -> {object:?} {class}:{permission}")]
pub struct AccessDenied {
    pub reason: DenyReason,
    pub subject: String,
    pub identity: String,
    pub object: AccessObject,
    pub class: ObjectClass,
    pub permission: Permission,
}

impl AccessDenied {
    fn from_record(record: &AuditRecord) -> Option<Self> {
        match record.decision {
            Decision::Allow => None,
            Decision::Deny(reason) => Some(AccessDenied {
                reason,
                subject: record.request.subject.clone(),
                identity: record.request.identity.clone(),
                object: record.request.object.clone(),
                class: record.request.class,
                permission: record.request.permission,
            }),
        }
    }
}

enum Resolved {
    Labeled(ObjectContext),
    Domain(String),
    Unlabeled,
}

fn resolve_object(labeling: &Labeling, object: &AccessObject) -> Resolved {
    match object {
        AccessObject::Domain(d) => Resolved::Domain(d.clone()),
        AccessObject::Path(p) => match labeling.lookup(p) {
            Some(ctx) => Resolved::Labeled(ctx.clone()),
            None => Resolved::Unlabeled,
        },
    }
}

fn dac_allows(identity: &str, object: &Resolved, permission: Permission) -> bool {
    if identity == ROOT_IDENTITY {
        return true;
    }
    match object {
        Resolved::Labeled(ctx) => ctx.owner == identity || ctx.world.contains(&permission),
        // only root may move a process into another domain
        Resolved::Domain(_) | Resolved::Unlabeled => false,
    }
}

fn evaluate(policy: Option<&Policy>, labeling: &Labeling, request: &AccessRequest) -> AuditRecord {
    let resolved = resolve_object(labeling, &request.object);
    let object_label = match &resolved {
        Resolved::Labeled(ctx) => Some(ctx.label.clone()),
        Resolved::Domain(d) => Some(d.clone()),
        Resolved::Unlabeled => None,
    };
    let record = |decision, mac_consulted, matched_rule| AuditRecord {
        request: request.clone(),
        object_label: object_label.clone(),
        decision,
        mac_consulted,
        matched_rule,
    };

    let dac = dac_allows(&request.identity, &resolved, request.permission);
    if matches!(resolved, Resolved::Unlabeled) && (policy.is_some() || !dac) {
        return record(Decision::Deny(DenyReason::Unlabeled), false, None);
    }
    if !dac {
        return record(Decision::Deny(DenyReason::Dac), false, None);
    }
    let Some(policy) = policy else {
        return record(Decision::Allow, false, None);
    };
    if !policy.enforces(&request.subject) {
        return record(Decision::Allow, false, None);
    }
    let label = object_label.as_deref().unwrap_or_default();
    let path = match &request.object {
        AccessObject::Path(p) => Some(p.as_str()),
        AccessObject::Domain(_) => None,
    };
    let matched = policy
        .rules_for_subject(&request.subject)
        .find(|r| r.grants(&request.subject, label, request.class, request.permission, path));
    match matched {
        Some(rule) => record(Decision::Allow, true, Some(rule.clone())),
        None => record(Decision::Deny(DenyReason::NoMatchingRule), true, None),
    }
}

/// Full check: discretionary layer, then the policy. The final decision is
/// the conjunction of both; root passes the first layer only.
pub fn check_access(policy: &Policy, labeling: &Labeling, request: &AccessRequest) -> AuditRecord {
    evaluate(Some(policy), labeling, request)
}

/// Check with confinement disabled: discretionary layer only.
pub fn check_dac(labeling: &Labeling, request: &AccessRequest) -> AuditRecord {
    evaluate(None, labeling, request)
}

/// Per-node enforcement point. When disabled every action passes and
/// nothing is audited.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Enforcer {
    pub enabled: bool,
    pub policy: Policy,
    pub labeling: Labeling,
    audit: Vec<AuditRecord>,
}

impl Enforcer {
    pub fn new(enabled: bool, mode: Mode) -> Self {
        Enforcer { enabled, policy: Policy::new(mode), ..Default::default() }
    }

    pub fn check(&mut self, request: AccessRequest) -> Result<(), AccessDenied> {
        if !self.enabled {
            return Ok(());
        }
        let record = check_access(&self.policy, &self.labeling, &request);
        let denied = AccessDenied::from_record(&record);
        if let Some(d) = &denied {
            log::debug!("{d}");
        }
        self.audit.push(record);
        denied.map_or(Ok(()), Err)
    }

    pub fn audit_log(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn denials(&self) -> impl Iterator<Item = &AuditRecord> {
        self.audit.iter().filter(|r| !r.decision.is_allow())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.policy = set_mode(std::mem::take(&mut self.policy), mode);
    }
}
