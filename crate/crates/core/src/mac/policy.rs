//! Type-enforcement policy model and its text format.
//!
//! ```text
//! mode strict;
//! enforce part_0_svc_t;
//! allow part_0_svc_t sw_t:file { execute } under /opt/slapgrid/1f2e/bin/httpd;
//! allow part_0_svc_t part_0_t:file { read };
//! allow part_0_svc_t part_0_t:file { write } under /srv/slapgrid/slappart0/var/log;
//! ```
//!
//! `under <path>` narrows a rule to one subtree of the object label.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::derive_partition_identity;

pub const AGENT_SUBJECT: &str = "slapgrid_t";
pub const SOFTWARE_LABEL: &str = "sw_t";
pub const BASE_LABEL: &str = "base_t";

pub fn partition_object_label(index: u32) -> String {
    format!("part_{index}_t")
}

pub fn partition_subject_label(index: u32) -> String {
    format!("part_{index}_svc_t")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    File,
    Dir,
    Process,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::File, ObjectClass::Dir, ObjectClass::Process];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::File => "file",
            ObjectClass::Dir => "dir",
            ObjectClass::Process => "process",
        }
    }
}

impl FromStr for ObjectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "file" => Ok(ObjectClass::File),
            "dir" => Ok(ObjectClass::Dir),
            "process" => Ok(ObjectClass::Process),
            other => Err(format!("unknown object class `{other}`")),
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permission {
    Read,
    Write,
    Execute,
    Transition,
}

impl Permission {
    pub const ALL: [Permission; 4] = [Permission::Read, Permission::Write, Permission::Execute, Permission::Transition];

    pub fn as_str(self) -> &'static str {
        match self {
            Permission::Read => "read",
            Permission::Write => "write",
            Permission::Execute => "execute",
            Permission::Transition => "transition",
        }
    }
}

impl FromStr for Permission {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(Permission::Read),
            "write" => Ok(Permission::Write),
            "execute" => Ok(Permission::Execute),
            "transition" => Ok(Permission::Transition),
            other => Err(format!("unknown permission `{other}`")),
        }
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Targeted,
    Strict,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "targeted" => Ok(Mode::Targeted),
            "strict" => Ok(Mode::Strict),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Targeted => "targeted",
            Mode::Strict => "strict",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AllowRule {
    pub subject: String,
    pub object: String,
    pub class: ObjectClass,
    pub permissions: BTreeSet<Permission>,
    /// Restricts the rule to paths at or below this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
}

impl AllowRule {
    pub fn new(
        subject: impl Into<String>,
        object: impl Into<String>,
        class: ObjectClass,
        permissions: impl IntoIterator<Item = Permission>,
    ) -> Self {
        AllowRule {
            subject: subject.into(),
            object: object.into(),
            class,
            permissions: permissions.into_iter().collect(),
            scope: None,
        }
    }

    pub fn under(mut self, scope: impl Into<String>) -> Self {
        self.scope = Some(scope.into());
        self
    }

    /// True when this rule grants `permission` on `class` objects labeled
    /// `object` for `subject`, at `path` if the object is a filesystem path.
    pub fn grants(&self, subject: &str, object: &str, class: ObjectClass, permission: Permission, path: Option<&str>) -> bool {
        if self.subject != subject || self.object != object || self.class != class {
            return false;
        }
        if !self.permissions.contains(&permission) {
            return false;
        }
        match (&self.scope, path) {
            (None, _) => true,
            (Some(scope), Some(path)) => path_within(path, scope),
            (Some(_), None) => false,
        }
    }
}

/// True when `path` is `scope` or lies below it.
pub fn path_within(path: &str, scope: &str) -> bool {
    let scope = scope.trim_end_matches('/');
    if scope.is_empty() {
        return path.starts_with('/');
    }
    path == scope || (path.starts_with(scope) && path[scope.len()..].starts_with('/'))
}

impl fmt::Display for AllowRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "allow {} {}:{} {{", self.subject, self.object, self.class)?;
        for p in &self.permissions {
            write!(f, " {p}")?;
        }
        f.write_str(" }")?;
        if let Some(scope) = &self.scope {
            write!(f, " under {scope}")?;
        }
        f.write_str(";")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Policy {
    pub mode: Mode,
    /// Subjects under enforcement in targeted mode. Ignored in strict mode.
    pub labeled_subjects: BTreeSet<String>,
    pub rules: BTreeSet<AllowRule>,
}

impl Policy {
    pub fn new(mode: Mode) -> Self {
        Policy { mode, ..Default::default() }
    }

    /// Whether MAC is consulted for `subject` under the current mode.
    pub fn enforces(&self, subject: &str) -> bool {
        match self.mode {
            Mode::Strict => true,
            Mode::Targeted => self.labeled_subjects.contains(subject),
        }
    }

    pub fn add_rules(&mut self, rules: impl IntoIterator<Item = AllowRule>) {
        self.rules.extend(rules);
    }

    pub fn remove_rule(&mut self, rule: &AllowRule) -> bool {
        self.rules.remove(rule)
    }

    pub fn label_subject(&mut self, subject: impl Into<String>) {
        self.labeled_subjects.insert(subject.into());
    }

    pub fn rules_for_subject<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a AllowRule> + 'a {
        self.rules.iter().filter(move |r| r.subject == subject)
    }
}

/// Returns `policy` with its mode changed. Rules and labeled subjects are untouched.
pub fn set_mode(mut policy: Policy, mode: Mode) -> Policy {
    policy.mode = mode;
    policy
}

/// The confinement pattern for the services of one partition: execute the
/// service binary from a software root, read anything in the partition, write
/// only below its log directory.
pub fn generate_partition_policy(index: u32, service_binary: Option<&str>) -> BTreeSet<AllowRule> {
    let subject = partition_subject_label(index);
    let object = partition_object_label(index);
    let root = derive_partition_identity(index).root_path;
    let mut exec = AllowRule::new(&subject, SOFTWARE_LABEL, ObjectClass::File, [Permission::Execute]);
    if let Some(binary) = service_binary {
        exec = exec.under(binary);
    }
    [
        exec,
        AllowRule::new(&subject, &object, ObjectClass::File, [Permission::Read]),
        AllowRule::new(&subject, &object, ObjectClass::File, [Permission::Write]).under(format!("{root}/var/log")),
    ]
    .into_iter()
    .collect()
}

/// Policy for the deployment agent itself: manage software roots and
/// partitions, launch partition services, read the base system.
pub fn generate_agent_policy(partition_count: u32) -> BTreeSet<AllowRule> {
    use Permission::*;
    let mut rules = BTreeSet::new();
    rules.insert(AllowRule::new(AGENT_SUBJECT, SOFTWARE_LABEL, ObjectClass::File, [Read, Write, Execute]));
    rules.insert(AllowRule::new(AGENT_SUBJECT, BASE_LABEL, ObjectClass::File, [Read]));
    for n in 0..partition_count {
        rules.insert(AllowRule::new(AGENT_SUBJECT, partition_object_label(n), ObjectClass::File, [Read, Write]));
        rules.insert(AllowRule::new(AGENT_SUBJECT, partition_subject_label(n), ObjectClass::Process, [Transition]));
    }
    rules
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("policy line {line}: {message}")]
pub struct PolicyError {
    pub line: usize,
    pub message: String,
}

/// Parses the policy text format. Blank lines and `#` comments are skipped.
pub fn parse_policy(text: &str) -> Result<Policy, PolicyError> {
    let mut policy = Policy::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| PolicyError { line: line_no, message };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let body = line.strip_suffix(';').ok_or_else(|| err("missing trailing `;`".into()))?.trim_end();
        let (keyword, rest) = body.split_once(char::is_whitespace).ok_or_else(|| err(format!("incomplete statement `{body}`")))?;
        let rest = rest.trim();
        match keyword {
            "mode" => policy.mode = rest.parse().map_err(err)?,
            "enforce" => {
                if rest.is_empty() || rest.contains(char::is_whitespace) {
                    return Err(err(format!("bad subject `{rest}`")));
                }
                policy.labeled_subjects.insert(rest.to_string());
            }
            "allow" => {
                policy.rules.insert(parse_rule(rest).map_err(err)?);
            }
            other => return Err(err(format!("unknown statement `{other}`"))),
        }
    }
    Ok(policy)
}

fn parse_rule(rest: &str) -> Result<AllowRule, String> {
    let open = rest.find('{').ok_or("missing `{`")?;
    let close = rest.find('}').ok_or("missing `}`")?;
    if close < open {
        return Err("misplaced `}`".into());
    }
    let head: Vec<&str> = rest[..open].split_whitespace().collect();
    let [subject, target] = head[..] else {
        return Err(format!("expected `<subject> <object>:<class>`, got `{}`", rest[..open].trim()));
    };
    let (object, class) = target.split_once(':').ok_or_else(|| format!("missing class in `{target}`"))?;
    if object.is_empty() {
        return Err("empty object label".into());
    }
    let class: ObjectClass = class.parse()?;
    let permissions = rest[open + 1..close]
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<BTreeSet<Permission>, _>>()?;
    if permissions.is_empty() {
        return Err("empty permission set".into());
    }
    let tail: Vec<&str> = rest[close + 1..].split_whitespace().collect();
    let scope = match tail[..] {
        [] => None,
        ["under", path] if path.starts_with('/') => Some(path.to_string()),
        _ => return Err(format!("unexpected trailing text `{}`", rest[close + 1..].trim())),
    };
    Ok(AllowRule { subject: subject.to_string(), object: object.to_string(), class, permissions, scope })
}

/// Canonical text form. `parse_policy(&serialize_policy(p)) == p`.
pub fn serialize_policy(policy: &Policy) -> String {
    let mut out = format!("mode {};\n", policy.mode);
    for s in &policy.labeled_subjects {
        out.push_str(&format!("enforce {s};\n"));
    }
    for r in &policy.rules {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}
