//! The per-node agent: polls the master, installs software releases into
//! software roots, deploys instances into partitions, supervises their
//! services and reports back.

mod fs;
mod supervisor;

pub use fs::{FileEntry, SimFs};
pub use supervisor::{backoff_delay, Actual, Desired, ProcessTable, ServiceEntry, ServiceKind, ServiceSpec, BACKOFF_CAP};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{compute, GridHost, GridTransport};
use crate::mac::{
    generate_agent_policy, generate_partition_policy, partition_subject_label, path_within, AccessDenied,
    AccessRequest, Enforcer, Labeling, Mode, ObjectClass, Permission, AGENT_SUBJECT,
};
use crate::master::{LinkError, MasterLink};
use crate::model::{
    derive_partition_identity, software_install_root, InstallStatus, Lifecycle, Parameters, PartitionIdentity, Tick,
    ROOT_IDENTITY, SYSTEM_IDENTITY,
};
use crate::profile::{
    merge_extends, parse_profile, plan, resolve, Artifact, Fetch, PlanTarget, Profile, RecipeRegistry, TargetContext,
};
use crate::wire::{ErrorCode, InstanceReport, SlapMessage, Task, Trace};

/// Base-system directories labeled at preparation time. Paths outside these,
/// the partitions and the software roots stay unlabeled.
pub const BASE_PATHS: [&str; 7] = ["/etc", "/usr", "/bin", "/lib", "/var", "/tmp", "/srv/slapgrid"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confinement {
    pub enabled: bool,
    pub mode: Mode,
    /// Install the agent's own policy at preparation time.
    pub agent_policy: bool,
}

impl Confinement {
    pub fn off() -> Self {
        Confinement { enabled: false, mode: Mode::Targeted, agent_policy: false }
    }

    pub fn on(mode: Mode) -> Self {
        Confinement { enabled: true, mode, agent_policy: true }
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("master refused {node}: {message}")]
    Refused { node: String, code: ErrorCode, message: String },
    #[error("unexpected reply from master: {0}")]
    UnexpectedReply(String),
    #[error(transparent)]
    Link(#[from] LinkError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalPartition {
    pub index: u32,
    pub identity: PartitionIdentity,
    pub ipv6: Option<String>,
    pub ipv4: Option<String>,
    pub occupant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftwareRoot {
    pub url: String,
    pub root: String,
    pub status: InstallStatus,
    pub artifacts: BTreeSet<Artifact>,
    /// Resolved software profile, the base layer of every instance profile.
    pub profile: Option<Profile>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalInstance {
    pub instance_id: String,
    pub partition: u32,
    pub release_url: String,
    pub instance_type: String,
    pub parameters: Parameters,
    pub lifecycle: Lifecycle,
    pub connection: Parameters,
    pub artifacts: BTreeSet<Artifact>,
    pub error: Option<String>,
}

/// What one agent step did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepSummary {
    pub tasks: usize,
    pub installs: Vec<(String, InstallStatus)>,
    pub deploys: Vec<(String, Lifecycle)>,
    /// Artifacts created or changed during this step.
    pub new_artifacts: usize,
    pub restarts: Vec<String>,
    pub errors: Vec<String>,
}

/// Collaborators an agent step needs besides the master link.
pub struct StepEnv<'a> {
    pub registry: &'a RecipeRegistry,
    pub fetch: &'a dyn Fetch,
    pub transport: &'a mut dyn GridTransport,
    pub trace: Option<&'a Trace>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeAgent {
    pub node_id: String,
    pub credentials: String,
    pub partitions: Vec<LocalPartition>,
    pub software_roots: BTreeMap<String, SoftwareRoot>,
    pub instances: BTreeMap<String, LocalInstance>,
    pub fs: SimFs,
    pub services: ProcessTable,
    pub grid: GridHost,
    pub enforcer: Enforcer,
    /// Client services attached to their server.
    pub attached: BTreeSet<String>,
    audit_cursor: usize,
}

fn expect_ack(node: &str, reply: SlapMessage) -> Result<(), NodeError> {
    match reply {
        SlapMessage::Ack { .. } => Ok(()),
        SlapMessage::Error { code, message, .. } => Err(NodeError::Refused { node: node.to_string(), code, message }),
        other => Err(NodeError::UnexpectedReply(other.kind().to_string())),
    }
}

/// Prepares a node: creates its partitions, labels the filesystem, sets up
/// confinement and registers with the master.
pub fn slapprepare(
    node_id: &str,
    credentials: &str,
    partition_count: u32,
    confinement: Confinement,
    link: &mut dyn MasterLink,
) -> Result<NodeAgent, NodeError> {
    let partitions = (0..partition_count)
        .map(|index| LocalPartition {
            index,
            identity: derive_partition_identity(index),
            ipv6: None,
            ipv4: None,
            occupant: None,
        })
        .collect();
    let mut agent = NodeAgent {
        node_id: node_id.to_string(),
        credentials: credentials.to_string(),
        partitions,
        software_roots: BTreeMap::new(),
        instances: BTreeMap::new(),
        fs: SimFs::new(),
        services: ProcessTable::new(),
        grid: GridHost::default(),
        enforcer: Enforcer::new(confinement.enabled, confinement.mode),
        attached: BTreeSet::new(),
        audit_cursor: 0,
    };
    agent.enforcer.labeling = agent.label_filesystem();
    if confinement.agent_policy {
        agent.install_agent_policy();
    }
    agent.register(link)?;
    Ok(agent)
}

impl NodeAgent {
    /// Registers (or refreshes the registration of) this node.
    pub fn register(&self, link: &mut dyn MasterLink) -> Result<(), NodeError> {
        let reply = link.call(&SlapMessage::RegisterNode {
            node_id: self.node_id.clone(),
            credentials: self.credentials.clone(),
            partition_count: self.partitions.len() as u32,
        })?;
        expect_ack(&self.node_id, reply)
    }

    pub fn partition_root(&self, index: u32) -> Option<&str> {
        self.partitions.get(index as usize).map(|p| p.identity.root_path.as_str())
    }

    /// Labels every known file, the base system directories, the software
    /// base and each partition root.
    pub fn label_filesystem(&self) -> Labeling {
        let paths = self.fs.iter().map(|(p, _)| p).chain(BASE_PATHS);
        Labeling::from_paths(paths, self.partitions.iter().map(|p| p.identity.root_path.as_str()))
    }

    pub fn install_agent_policy(&mut self) {
        self.enforcer.policy.add_rules(generate_agent_policy(self.partitions.len() as u32));
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.enforcer.set_mode(mode);
    }

    /// A write performed by the agent itself (root identity, agent subject).
    pub fn agent_write(&mut self, path: &str, content: &str, now: Tick) -> Result<(), AccessDenied> {
        let req = AccessRequest::path(AGENT_SUBJECT, ROOT_IDENTITY, path, ObjectClass::File, Permission::Write, now);
        self.enforcer.check(req)?;
        self.fs.write(path, ROOT_IDENTITY, content);
        Ok(())
    }

    fn call(&self, link: &mut dyn MasterLink, msg: SlapMessage) -> Result<SlapMessage, LinkError> {
        link.call(&msg)
    }

    /// One full cycle against the master at tick `now`.
    pub fn step(&mut self, link: &mut dyn MasterLink, env: &mut StepEnv<'_>, now: Tick) -> Result<StepSummary, NodeError> {
        let mut summary = StepSummary::default();
        let reply = self.call(link, SlapMessage::GetTasks { node_id: self.node_id.clone(), tick: now })?;
        let tasks = match reply {
            SlapMessage::TaskList { tasks, .. } => tasks,
            SlapMessage::Error { code, message, .. } => {
                return Err(NodeError::Refused { node: self.node_id.clone(), code, message })
            }
            other => return Err(NodeError::UnexpectedReply(other.kind().to_string())),
        };
        summary.tasks = tasks.len();

        for task in &tasks {
            if let Task::Install { release_url } = task {
                let (status, new) = self.install(release_url, env, now);
                summary.new_artifacts += new;
                if let Some(e) = &self.software_roots[release_url].error {
                    summary.errors.push(format!("install {release_url}: {e}"));
                }
                summary.installs.push((release_url.clone(), status));
                let reply = self.call(
                    link,
                    SlapMessage::ReportInstall {
                        node_id: self.node_id.clone(),
                        tick: now,
                        release_url: release_url.clone(),
                        status,
                    },
                )?;
                if let Err(e) = expect_ack(&self.node_id, reply) {
                    summary.errors.push(e.to_string());
                }
            }
        }
        for task in &tasks {
            match task {
                Task::Install { .. } => {}
                Task::Deploy { instance_id, .. } => {
                    let (lifecycle, new) = self.deploy(task, env, now);
                    summary.new_artifacts += new;
                    if let Some(e) = self.instances.get(instance_id).and_then(|i| i.error.as_ref()) {
                        summary.errors.push(format!("deploy {instance_id}: {e}"));
                    }
                    summary.deploys.push((instance_id.clone(), lifecycle));
                }
                Task::Stop { instance_id, partition_index } => self.stop(instance_id, *partition_index),
                Task::Destroy { instance_id, partition_index } => self.destroy(instance_id, *partition_index, now),
            }
        }

        summary.restarts = self.supervise(now, env);

        let states: Vec<InstanceReport> = self
            .instances
            .values()
            .map(|i| InstanceReport {
                instance_id: i.instance_id.clone(),
                lifecycle: i.lifecycle,
                connection: i.connection.clone(),
            })
            .collect();
        let reply = self.call(link, SlapMessage::ReportState { node_id: self.node_id.clone(), tick: now, states })?;
        if let Err(e) = expect_ack(&self.node_id, reply) {
            summary.errors.push(e.to_string());
        }
        self.instances.retain(|_, i| i.lifecycle != Lifecycle::Destroyed);
        self.flush_audit(env.trace);
        Ok(summary)
    }

    fn flush_audit(&mut self, trace: Option<&Trace>) {
        let log = self.enforcer.audit_log();
        if let Some(trace) = trace {
            for record in &log[self.audit_cursor.min(log.len())..] {
                trace.record(&SlapMessage::AccessCheck {
                    identity: self.node_id.clone(),
                    request: record.request.clone(),
                    decision: record.decision,
                });
            }
        }
        self.audit_cursor = log.len();
    }

    /// Install phase: fetch, parse, merge, resolve, plan and execute the
    /// release into its software root. Returns the status and the number of
    /// new artifacts.
    pub fn install(&mut self, url: &str, env: &StepEnv<'_>, now: Tick) -> (InstallStatus, usize) {
        let root = software_install_root(url);
        let outcome = self.run_install(url, &root, env, now);
        let entry = self.software_roots.entry(url.to_string()).or_insert_with(|| SoftwareRoot {
            url: url.to_string(),
            root: root.clone(),
            status: InstallStatus::Installing,
            artifacts: BTreeSet::new(),
            profile: None,
            error: None,
        });
        match outcome {
            Ok((profile, artifacts)) => {
                let new = artifacts.len();
                entry.artifacts.extend(artifacts);
                entry.profile = Some(profile);
                entry.status = InstallStatus::Installed;
                entry.error = None;
                (InstallStatus::Installed, new)
            }
            Err(e) => {
                log::warn!("{}: install of {url} failed: {e}", self.node_id);
                entry.status = InstallStatus::Failed;
                entry.error = Some(e);
                (InstallStatus::Failed, 0)
            }
        }
    }

    fn run_install(
        &mut self,
        url: &str,
        root: &str,
        env: &StepEnv<'_>,
        now: Tick,
    ) -> Result<(Profile, Vec<Artifact>), String> {
        let text = env.fetch.fetch(url).map_err(|e| e.to_string())?;
        let parsed = parse_profile(&text, url).map_err(|e| e.to_string())?;
        let mut merged = merge_extends(parsed, env.fetch).map_err(|e| e.to_string())?;
        merged.set("buildout", "directory", root);
        let resolved = resolve(&merged).map_err(|e| e.to_string())?;
        let install_plan = plan(&resolved, PlanTarget::Software { root: root.to_string() }).map_err(|e| e.to_string())?;
        let mut ctx = TargetContext {
            target: install_plan.target.clone(),
            identity: SYSTEM_IDENTITY.to_string(),
            subject: AGENT_SUBJECT.to_string(),
            parameters: Parameters::new(),
            instance_id: None,
            fs: &mut self.fs,
            enforcer: &mut self.enforcer,
            fetch: env.fetch,
            services: &mut self.services,
            grid: &mut self.grid,
            published: Parameters::new(),
            now,
        };
        let artifacts = env.registry.execute(&install_plan, &mut ctx).map_err(|e| e.to_string())?;
        Ok((resolved, artifacts))
    }

    /// The profile an instance is built from: the resolved software
    /// profile, the instance profile of the requested type, and the
    /// request and partition parameters.
    pub fn instance_profile(
        &self,
        release_url: &str,
        instance_type: &str,
        index: u32,
        parameters: &Parameters,
        addresses: (&str, &str),
        fetch: &dyn Fetch,
    ) -> Result<Profile, String> {
        let software = self
            .software_roots
            .get(release_url)
            .filter(|s| s.status == InstallStatus::Installed)
            .and_then(|s| s.profile.as_ref())
            .ok_or_else(|| format!("release {release_url} is not installed on {}", self.node_id))?;
        let origin = software
            .get("instance-profiles", instance_type)
            .ok_or_else(|| format!("release has no instance profile for type `{instance_type}`"))?;
        let text = fetch.fetch(origin).map_err(|e| e.to_string())?;
        let instance = merge_extends(parse_profile(&text, origin).map_err(|e| e.to_string())?, fetch)
            .map_err(|e| e.to_string())?;

        let mut layered = software.clone();
        layered.origin = origin.to_string();
        if let Some(buildout) = layered.sections.get_mut("buildout") {
            buildout.shift_remove("parts");
        }
        layered.sections.shift_remove("slap-parameter");
        layered.sections.shift_remove("slap-partition");
        layered.overlay(&instance);
        let id = derive_partition_identity(index);
        layered.sections.entry("slap-parameter".to_string()).or_default();
        for (k, v) in parameters {
            layered.set("slap-parameter", k, v.as_str());
        }
        layered.set("slap-partition", "index", index.to_string());
        layered.set("slap-partition", "user", id.user_label.as_str());
        layered.set("slap-partition", "tap", id.tap_label.as_str());
        layered.set("slap-partition", "root", id.root_path.as_str());
        layered.set("slap-partition", "ipv6", addresses.0);
        layered.set("slap-partition", "ipv4", addresses.1);
        layered.set("buildout", "directory", id.root_path.as_str());
        resolve(&layered).map_err(|e| e.to_string())
    }

    /// Instance phase for a deploy task. Returns the resulting lifecycle
    /// and the number of new artifacts.
    pub fn deploy(&mut self, task: &Task, env: &StepEnv<'_>, now: Tick) -> (Lifecycle, usize) {
        let Task::Deploy { instance_id, release_url, instance_type, partition_index, slapparameters, ipv6, ipv4 } = task
        else {
            return (Lifecycle::Failed, 0);
        };
        let index = *partition_index;
        let outcome = self.run_deploy(instance_id, release_url, instance_type, index, slapparameters, (ipv6, ipv4), env, now);
        let local = self.instances.entry(instance_id.clone()).or_insert_with(|| LocalInstance {
            instance_id: instance_id.clone(),
            partition: index,
            release_url: release_url.clone(),
            instance_type: instance_type.clone(),
            parameters: slapparameters.clone(),
            lifecycle: Lifecycle::Deploying,
            connection: Parameters::new(),
            artifacts: BTreeSet::new(),
            error: None,
        });
        local.parameters = slapparameters.clone();
        match outcome {
            Ok((artifacts, published)) => {
                let new = artifacts.len();
                local.artifacts.extend(artifacts);
                local.connection.extend(published);
                local.lifecycle = Lifecycle::Running;
                local.error = None;
                (Lifecycle::Running, new)
            }
            Err(e) => {
                log::warn!("{}: deploy of {instance_id} failed: {e}", self.node_id);
                local.lifecycle = Lifecycle::Failed;
                local.error = Some(e);
                (Lifecycle::Failed, 0)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_deploy(
        &mut self,
        instance_id: &str,
        release_url: &str,
        instance_type: &str,
        index: u32,
        parameters: &Parameters,
        addresses: (&str, &str),
        env: &StepEnv<'_>,
        now: Tick,
    ) -> Result<(Vec<Artifact>, Parameters), String> {
        let partition = self.partitions.get_mut(index as usize).ok_or_else(|| format!("no partition {index}"))?;
        match &partition.occupant {
            Some(other) if other != instance_id => {
                return Err(format!("partition {index} already holds {other}"));
            }
            _ => {}
        }
        partition.occupant = Some(instance_id.to_string());
        partition.ipv6 = Some(addresses.0.to_string());
        partition.ipv4 = Some(addresses.1.to_string());
        let identity = partition.identity.clone();

        let profile = self.instance_profile(release_url, instance_type, index, parameters, addresses, env.fetch)?;
        let target = PlanTarget::Partition { index, root: identity.root_path.clone() };
        let install_plan = plan(&profile, target).map_err(|e| e.to_string())?;
        let mut ctx = TargetContext {
            target: install_plan.target.clone(),
            identity: identity.user_label.clone(),
            subject: AGENT_SUBJECT.to_string(),
            parameters: parameters.clone(),
            instance_id: Some(instance_id.to_string()),
            fs: &mut self.fs,
            enforcer: &mut self.enforcer,
            fetch: env.fetch,
            services: &mut self.services,
            grid: &mut self.grid,
            published: Parameters::new(),
            now,
        };
        let artifacts = env.registry.execute(&install_plan, &mut ctx).map_err(|e| e.to_string())?;
        let published = std::mem::take(&mut ctx.published);
        if let Some(outside) = artifacts.iter().filter_map(Artifact::path).find(|p| !path_within(p, &identity.root_path)) {
            return Err(format!("artifact {outside} escapes {}", identity.root_path));
        }

        self.install_partition_policy(index);
        let ids: Vec<String> = self.services.of_partition(index).map(|e| e.spec.service_id.clone()).collect();
        for id in ids {
            let subject = self.services.get(&id).map(|e| e.spec.subject.clone()).unwrap_or_default();
            let launched = self.launch_allowed(&subject, now);
            self.services.start(&id, launched, now);
        }
        Ok((artifacts, published))
    }

    /// Adds the generated confinement rules for partition `index`, scoped to
    /// the binaries of its services. In targeted mode the partition's
    /// service subject is put under enforcement.
    pub fn install_partition_policy(&mut self, index: u32) {
        let binaries: BTreeSet<String> = self.services.of_partition(index).filter_map(|e| e.spec.binary.clone()).collect();
        if binaries.is_empty() {
            self.enforcer.policy.add_rules(generate_partition_policy(index, None));
        }
        for binary in &binaries {
            self.enforcer.policy.add_rules(generate_partition_policy(index, Some(binary)));
        }
        self.enforcer.policy.label_subject(partition_subject_label(index));
    }

    fn launch_allowed(&mut self, subject: &str, now: Tick) -> bool {
        let req = AccessRequest::transition(AGENT_SUBJECT, ROOT_IDENTITY, subject, now);
        self.enforcer.check(req).is_ok()
    }

    pub fn stop(&mut self, instance_id: &str, index: u32) {
        let ids: Vec<String> = self.services.of_partition(index).map(|e| e.spec.service_id.clone()).collect();
        for id in ids {
            self.services.set_desired(&id, Desired::Stopped);
            self.attached.remove(&id);
        }
        if let Some(i) = self.instances.get_mut(instance_id) {
            i.lifecycle = Lifecycle::Stopped;
        } else {
            self.instances.insert(instance_id.to_string(), self.placeholder(instance_id, index, Lifecycle::Stopped));
        }
    }

    pub fn destroy(&mut self, instance_id: &str, index: u32, _now: Tick) {
        let Some(root) = self.partition_root(index).map(str::to_string) else { return };
        let ids: Vec<String> = self.services.of_partition(index).map(|e| e.spec.service_id.clone()).collect();
        for id in &ids {
            self.attached.remove(id);
        }
        self.services.remove_partition(index);
        self.fs.remove_under(&root);
        self.grid.remove_partition(&root);
        let subject = partition_subject_label(index);
        self.enforcer.policy.rules.retain(|r| r.subject != subject);
        if let Some(p) = self.partitions.get_mut(index as usize) {
            p.occupant = None;
        }
        let mut gone = self.instances.remove(instance_id).unwrap_or_else(|| self.placeholder(instance_id, index, Lifecycle::Destroyed));
        gone.lifecycle = Lifecycle::Destroyed;
        gone.artifacts.clear();
        self.instances.insert(instance_id.to_string(), gone);
    }

    fn placeholder(&self, instance_id: &str, index: u32, lifecycle: Lifecycle) -> LocalInstance {
        LocalInstance {
            instance_id: instance_id.to_string(),
            partition: index,
            release_url: String::new(),
            instance_type: String::new(),
            parameters: Parameters::new(),
            lifecycle,
            connection: Parameters::new(),
            artifacts: BTreeSet::new(),
            error: None,
        }
    }

    /// Supervisor pass: restarts, then one step of every running service.
    pub fn supervise(&mut self, now: Tick, env: &mut StepEnv<'_>) -> Vec<String> {
        let enforcer = &mut self.enforcer;
        let restarted = self.services.supervisor_tick(now, |entry| {
            enforcer.check(AccessRequest::transition(AGENT_SUBJECT, ROOT_IDENTITY, &entry.spec.subject, now)).is_ok()
        });
        for id in self.services.running() {
            if self.services.take_injected_failure(&id) {
                self.services.record_outcome(&id, Actual::Failed, now);
                continue;
            }
            let spec = self.services.get(&id).expect("running service").spec.clone();
            let outcome = self.run_service(&spec, now, env);
            self.services.record_outcome(&id, outcome, now);
        }
        restarted
    }

    fn service_check(&mut self, spec: &ServiceSpec, path: &str, permission: Permission, now: Tick) -> bool {
        let req = AccessRequest::path(&spec.subject, &spec.identity, path, ObjectClass::File, permission, now);
        self.enforcer.check(req).is_ok()
    }

    fn service_log(&mut self, spec: &ServiceSpec, lines: &[String], now: Tick) -> bool {
        let Some(log) = &spec.log else { return true };
        if lines.is_empty() {
            return true;
        }
        if !self.service_check(spec, log, Permission::Write, now) {
            return false;
        }
        let text: String = lines.iter().map(|l| format!("[{now}] {l}\n")).collect();
        self.fs.append(log, &spec.identity, &text);
        true
    }

    /// The step contract of one service.
    fn run_service(&mut self, spec: &ServiceSpec, now: Tick, env: &mut StepEnv<'_>) -> Actual {
        if let Some(binary) = &spec.binary {
            if !self.service_check(spec, binary, Permission::Execute, now) {
                return Actual::Failed;
            }
        }
        if let Some(config) = &spec.config {
            if !self.service_check(spec, config, Permission::Read, now) || !self.fs.exists(config) {
                return Actual::Failed;
            }
        }
        let events = match &spec.kind {
            ServiceKind::Generic => Vec::new(),
            ServiceKind::GridServer { server_url } => {
                self.grid.projects.get_mut(server_url).map(|p| std::mem::take(&mut p.events)).unwrap_or_default()
            }
            ServiceKind::GridClient { .. } => match self.client_cycle(spec, now, env) {
                Ok(events) => events,
                Err(event) => {
                    self.service_log(spec, &[event], now);
                    return Actual::Failed;
                }
            },
        };
        if self.service_log(spec, &events, now) {
            Actual::Running
        } else {
            Actual::Failed
        }
    }

    /// Attach if needed, fetch one work unit, compute it and report.
    fn client_cycle(&mut self, spec: &ServiceSpec, now: Tick, env: &mut StepEnv<'_>) -> Result<Vec<String>, String> {
        let ServiceKind::GridClient { server_url, account_key, platform, client_id } = &spec.kind else {
            return Ok(Vec::new());
        };
        let mut events = Vec::new();
        if !self.attached.contains(&spec.service_id) {
            let attach = SlapMessage::Attach {
                client_id: client_id.clone(),
                server_url: server_url.clone(),
                account_key: account_key.clone(),
                platform: platform.clone(),
            };
            match self.grid_call(&attach, now, env) {
                SlapMessage::Ack { .. } => {
                    self.attached.insert(spec.service_id.clone());
                    events.push(format!("attached to {server_url}"));
                }
                SlapMessage::Error { code: ErrorCode::Unavailable, .. } => return Ok(events),
                SlapMessage::Error { message, .. } => return Err(format!("attach rejected: {message}")),
                other => return Err(format!("unexpected {} on attach", other.kind())),
            }
        }
        let fetch = SlapMessage::FetchWork {
            client_id: client_id.clone(),
            server_url: server_url.clone(),
            platform: platform.clone(),
        };
        let work = match self.grid_call(&fetch, now, env) {
            SlapMessage::WorkAssignment { work, .. } => work,
            SlapMessage::Error { code: ErrorCode::UnknownClient, .. } => {
                self.attached.remove(&spec.service_id);
                return Ok(events);
            }
            _ => return Ok(events),
        };
        let Some(item) = work else { return Ok(events) };
        let (output, error) = match compute(&item.app_name, &item.input) {
            Some(out) => (out, None),
            None => (String::new(), Some(format!("no executable for {}", item.app_name))),
        };
        let report = SlapMessage::ReportResult {
            client_id: client_id.clone(),
            server_url: server_url.clone(),
            wu_id: item.wu_id.clone(),
            output,
            error,
        };
        match self.grid_call(&report, now, env) {
            SlapMessage::Ack { .. } => events.push(format!("reported {}", item.wu_id)),
            SlapMessage::Error { message, .. } => events.push(format!("report of {} refused: {message}", item.wu_id)),
            _ => {}
        }
        Ok(events)
    }

    fn grid_call(&mut self, msg: &SlapMessage, now: Tick, env: &mut StepEnv<'_>) -> SlapMessage {
        if let Some(t) = env.trace {
            t.record(msg);
        }
        let url = match msg {
            SlapMessage::Attach { server_url, .. }
            | SlapMessage::FetchWork { server_url, .. }
            | SlapMessage::ReportResult { server_url, .. } => server_url.as_str(),
            _ => "",
        };
        let reply = if self.grid.serves(url) { self.serve_grid(msg, now) } else { env.transport.call(msg, now) };
        if let Some(t) = env.trace {
            t.record(&reply);
        }
        reply
    }

    /// Server side: answers if the project's server service is running.
    pub fn serve_grid(&mut self, msg: &SlapMessage, now: Tick) -> SlapMessage {
        let url = match msg {
            SlapMessage::Attach { server_url, .. }
            | SlapMessage::FetchWork { server_url, .. }
            | SlapMessage::ReportResult { server_url, .. } => server_url.clone(),
            _ => String::new(),
        };
        let up = self.services.iter().any(|e| {
            e.actual == Actual::Running && matches!(&e.spec.kind, ServiceKind::GridServer { server_url } if *server_url == url)
        });
        if !up {
            return SlapMessage::error(msg.identity(), ErrorCode::Unavailable, format!("{url} is not serving"));
        }
        self.grid.handle(msg, now)
    }
}
