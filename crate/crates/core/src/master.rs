//! The central directory: node registry, supplies, instance requests,
//! partition allocation, node reports and accounting.
//!
//! All mutation goes through [`Master::handle`], one message at a time.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AccountingRecord, ComputerPartition, InstallStatus, Lifecycle, NodeRecord, Parameters, PartitionRef,
    RequestedState, SoftwareInstance, SoftwareRelease, Tick, MAX_NODES, MAX_PARTITIONS_PER_NODE,
};
use crate::wire::{
    decode_message, encode_message, AccountingEdge, ErrorCode, InstanceReport, InstanceView, SlapMessage, Task,
    Trace, WireError,
};

pub const DEFAULT_STALE_AFTER: Tick = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MasterError {
    #[error("authentication failed for node `{0}`")]
    Authentication(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl MasterError {
    pub fn code(&self) -> ErrorCode {
        match self {
            MasterError::Authentication(_) => ErrorCode::Authentication,
            MasterError::UnknownNode(_) => ErrorCode::UnknownNode,
            MasterError::Consistency(_) => ErrorCode::Consistency,
            MasterError::Capacity(_) => ErrorCode::Capacity,
            MasterError::BadRequest(_) => ErrorCode::BadRequest,
        }
    }
}

/// Parameters of a `RequestInstance`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRequest {
    pub requester: String,
    pub reference: String,
    pub release_url: String,
    pub instance_type: String,
    pub slapparameters: Parameters,
    pub sla_node: Option<String>,
    pub state: RequestedState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Master {
    pub nodes: BTreeMap<String, NodeRecord>,
    pub partitions: BTreeMap<String, Vec<ComputerPartition>>,
    pub supplies: BTreeSet<(String, String)>,
    pub releases: BTreeMap<String, SoftwareRelease>,
    pub instances: BTreeMap<String, SoftwareInstance>,
    pub pending: VecDeque<String>,
    /// Node filter of each instance request that carried one.
    pub sla: BTreeMap<String, String>,
    pub ledger: Vec<AccountingRecord>,
    pub default_rate: u64,
    pub rates: BTreeMap<String, u64>,
    pub stale_after: Tick,
    pub stale: BTreeSet<String>,
    pub clock: Tick,
    next_instance: u64,
    /// Accounting edges not yet picked up by the caller.
    #[serde(skip)]
    outbox: Vec<SlapMessage>,
}

impl Default for Master {
    fn default() -> Self {
        Master::new()
    }
}

impl Master {
    pub fn new() -> Self {
        Master {
            nodes: BTreeMap::new(),
            partitions: BTreeMap::new(),
            supplies: BTreeSet::new(),
            releases: BTreeMap::new(),
            instances: BTreeMap::new(),
            pending: VecDeque::new(),
            sla: BTreeMap::new(),
            ledger: Vec::new(),
            default_rate: 1,
            rates: BTreeMap::new(),
            stale_after: DEFAULT_STALE_AFTER,
            stale: BTreeSet::new(),
            clock: 0,
            next_instance: 0,
            outbox: Vec::new(),
        }
    }

    pub fn advance(&mut self, now: Tick) {
        self.clock = self.clock.max(now);
    }

    pub fn rate_of(&self, release_url: &str) -> u64 {
        self.rates.get(release_url).copied().unwrap_or(self.default_rate)
    }

    pub fn take_events(&mut self) -> Vec<SlapMessage> {
        std::mem::take(&mut self.outbox)
    }

    pub fn register_node(&mut self, node_id: &str, credentials: &str, partition_count: u32) -> Result<(), MasterError> {
        if let Some(node) = self.nodes.get_mut(node_id) {
            if node.credentials != credentials {
                return Err(MasterError::Authentication(node_id.to_string()));
            }
            node.last_report_time = self.clock;
            return Ok(());
        }
        let ordinal = self.nodes.len() as u32;
        if ordinal >= MAX_NODES {
            return Err(MasterError::Capacity(format!("at most {MAX_NODES} nodes")));
        }
        if partition_count > MAX_PARTITIONS_PER_NODE {
            return Err(MasterError::Capacity(format!("at most {MAX_PARTITIONS_PER_NODE} partitions per node")));
        }
        self.nodes.insert(
            node_id.to_string(),
            NodeRecord {
                node_id: node_id.to_string(),
                credentials: credentials.to_string(),
                ordinal,
                partition_count,
                installed_releases: BTreeSet::new(),
                last_report_time: self.clock,
            },
        );
        self.partitions
            .insert(node_id.to_string(), (0..partition_count).map(|i| ComputerPartition::new(ordinal, i)).collect());
        Ok(())
    }

    fn known(&self, node_id: &str) -> Result<(), MasterError> {
        if self.nodes.contains_key(node_id) {
            Ok(())
        } else {
            Err(MasterError::UnknownNode(node_id.to_string()))
        }
    }

    pub fn supply(&mut self, release_url: &str, node_id: &str) -> Result<(), MasterError> {
        self.known(node_id)?;
        self.supplies.insert((node_id.to_string(), release_url.to_string()));
        self.releases
            .entry(release_url.to_string())
            .or_insert_with(|| SoftwareRelease::new(release_url))
            .status
            .entry(node_id.to_string())
            .or_insert(InstallStatus::Requested);
        Ok(())
    }

    pub fn find_instance(&self, requester: &str, reference: &str) -> Option<&SoftwareInstance> {
        self.instances.values().find(|i| i.requester == requester && i.reference == reference)
    }

    pub fn request_instance(&mut self, req: InstanceRequest) -> Result<SoftwareInstance, MasterError> {
        if let Some(node) = &req.sla_node {
            self.known(node)?;
        }
        if let Some(existing) = self.find_instance(&req.requester, &req.reference) {
            let id = existing.instance_id.clone();
            self.update_request(&id, req);
            return Ok(self.instances[&id].clone());
        }
        self.next_instance += 1;
        let id = format!("inst-{:04}", self.next_instance);
        let lifecycle = if req.state == RequestedState::Destroyed { Lifecycle::Destroyed } else { Lifecycle::Requested };
        self.instances.insert(
            id.clone(),
            SoftwareInstance {
                instance_id: id.clone(),
                requester: req.requester,
                reference: req.reference,
                release_url: req.release_url,
                instance_type: req.instance_type,
                slapparameters: req.slapparameters,
                requested_state: req.state,
                partition: None,
                lifecycle,
                connection: Parameters::new(),
                needs_redeploy: false,
            },
        );
        if let Some(node) = req.sla_node {
            self.sla.insert(id.clone(), node);
        }
        if lifecycle == Lifecycle::Requested && !self.allocate(&id) {
            self.pending.push_back(id.clone());
        }
        Ok(self.instances[&id].clone())
    }

    fn update_request(&mut self, id: &str, req: InstanceRequest) {
        let inst = self.instances.get_mut(id).expect("instance exists");
        if inst.lifecycle == Lifecycle::Destroyed {
            return;
        }
        if inst.slapparameters != req.slapparameters {
            inst.slapparameters = req.slapparameters;
            inst.needs_redeploy = inst.partition.is_some();
        }
        inst.requested_state = req.state;
        if req.state == RequestedState::Destroyed && inst.partition.is_none() {
            inst.lifecycle = Lifecycle::Destroyed;
            self.pending.retain(|p| p != id);
        }
    }

    fn free_count(&self, node_id: &str) -> usize {
        self.partitions.get(node_id).map_or(0, |ps| ps.iter().filter(|p| p.is_free()).count())
    }

    /// Places an instance per the first-fit rule. Returns false when no
    /// eligible node has a free partition.
    fn allocate(&mut self, id: &str) -> bool {
        let inst = &self.instances[id];
        let sla = self.sla.get(id);
        let mut best: Option<(&str, usize)> = None;
        for (node_id, node) in &self.nodes {
            if sla.is_some_and(|s| s != node_id) || !node.installed_releases.contains(&inst.release_url) {
                continue;
            }
            let free = self.free_count(node_id);
            if free > 0 && best.is_none_or(|(_, f)| free > f) {
                best = Some((node_id, free));
            }
        }
        let Some((node_id, _)) = best else {
            return false;
        };
        let node_id = node_id.to_string();
        let partition = self
            .partitions
            .get_mut(&node_id)
            .and_then(|ps| ps.iter_mut().find(|p| p.is_free()))
            .expect("node has a free partition");
        partition.occupy(id);
        let index = partition.index;
        let inst = self.instances.get_mut(id).expect("instance exists");
        inst.partition = Some(PartitionRef { node_id, index });
        inst.lifecycle = Lifecycle::Allocated;
        inst.needs_redeploy = false;
        true
    }

    /// Retries pending requests in arrival order.
    fn reevaluate_pending(&mut self) {
        let queue: Vec<String> = self.pending.drain(..).collect();
        for id in queue {
            if !self.allocate(&id) {
                self.pending.push_back(id);
            }
        }
    }

    pub fn get_tasks(&mut self, node_id: &str) -> Result<Vec<Task>, MasterError> {
        self.known(node_id)?;
        let clock = self.clock;
        if let Some(node) = self.nodes.get_mut(node_id) {
            node.last_report_time = clock;
        }
        self.stale.remove(node_id);
        self.mark_stale();

        let mut tasks = Vec::new();
        for (n, url) in &self.supplies {
            let installed = self.releases[url].status.get(n) == Some(&InstallStatus::Installed);
            if n == node_id && !installed {
                tasks.push(Task::Install { release_url: url.clone() });
            }
        }
        let partitions = &self.partitions;
        for inst in self.instances.values_mut() {
            let Some(PartitionRef { node_id: n, index }) = &inst.partition else { continue };
            if n != node_id {
                continue;
            }
            let (instance_id, partition_index) = (inst.instance_id.clone(), *index);
            let partition = &partitions[n][partition_index as usize];
            match inst.requested_state {
                RequestedState::Started if inst.lifecycle != Lifecycle::Running || inst.needs_redeploy => {
                    tasks.push(Task::Deploy {
                        instance_id,
                        release_url: inst.release_url.clone(),
                        instance_type: inst.instance_type.clone(),
                        partition_index,
                        slapparameters: inst.slapparameters.clone(),
                        ipv6: partition.ipv6_addr.clone(),
                        ipv4: partition.ipv4_local.clone(),
                    });
                    inst.needs_redeploy = false;
                    if inst.lifecycle == Lifecycle::Allocated {
                        inst.lifecycle = Lifecycle::Deploying;
                    }
                }
                RequestedState::Stopped if inst.lifecycle != Lifecycle::Stopped => {
                    tasks.push(Task::Stop { instance_id, partition_index });
                }
                RequestedState::Destroyed => tasks.push(Task::Destroy { instance_id, partition_index }),
                _ => {}
            }
        }
        Ok(tasks)
    }

    fn mark_stale(&mut self) {
        for (id, node) in &self.nodes {
            if self.clock.saturating_sub(node.last_report_time) > self.stale_after && self.stale.insert(id.clone()) {
                log::warn!("node {id} is stale (last report at tick {})", node.last_report_time);
            }
        }
    }

    /// Instances on nodes currently flagged stale. They are not moved.
    pub fn stale_instances(&self) -> Vec<&SoftwareInstance> {
        self.instances
            .values()
            .filter(|i| i.partition.as_ref().is_some_and(|p| self.stale.contains(&p.node_id)))
            .collect()
    }

    pub fn report_install(&mut self, node_id: &str, release_url: &str, status: InstallStatus) -> Result<(), MasterError> {
        self.known(node_id)?;
        if !self.supplies.contains(&(node_id.to_string(), release_url.to_string())) {
            let e = MasterError::Consistency(format!("{node_id} reports install of unsupplied {release_url}"));
            log::warn!("{e}");
            return Err(e);
        }
        if let Some(release) = self.releases.get_mut(release_url) {
            release.status.insert(node_id.to_string(), status);
        }
        let node = self.nodes.get_mut(node_id).expect("known node");
        node.last_report_time = self.clock;
        match status {
            InstallStatus::Installed => {
                node.installed_releases.insert(release_url.to_string());
                self.reevaluate_pending();
            }
            InstallStatus::Failed => {
                node.installed_releases.remove(release_url);
            }
            InstallStatus::Requested | InstallStatus::Installing => {}
        }
        Ok(())
    }

    /// Applies every report that concerns an instance of this node; the
    /// others are logged and rejected.
    pub fn report_state(&mut self, node_id: &str, reports: &[InstanceReport]) -> Result<(), MasterError> {
        self.known(node_id)?;
        let mut rejected = Vec::new();
        let mut freed = false;
        for report in reports {
            let owned = self.instances.get(&report.instance_id).and_then(|i| i.partition.as_ref()).is_some_and(|p| p.node_id == node_id);
            if !owned {
                log::warn!("{node_id} reported {} which is not allocated to it", report.instance_id);
                rejected.push(report.instance_id.clone());
                continue;
            }
            freed |= self.apply_report(report);
        }
        if freed {
            self.reevaluate_pending();
        }
        if rejected.is_empty() {
            Ok(())
        } else {
            Err(MasterError::Consistency(format!("{node_id} does not host {}", rejected.join(", "))))
        }
    }

    /// Returns true when a partition was freed.
    fn apply_report(&mut self, report: &InstanceReport) -> bool {
        let clock = self.clock;
        let inst = self.instances.get_mut(&report.instance_id).expect("checked by caller");
        if !report.connection.is_empty() {
            inst.connection = report.connection.clone();
        }
        let before = inst.lifecycle;
        let after = report.lifecycle;
        if before == after {
            return false;
        }
        inst.lifecycle = after;
        let id = inst.instance_id.clone();
        let requester = inst.requester.clone();
        let rate = self.rates.get(&inst.release_url).copied().unwrap_or(self.default_rate);
        let mut freed = false;
        match after {
            Lifecycle::Running => self.open_record(&id, &requester, rate, clock),
            Lifecycle::Stopped | Lifecycle::Failed => self.close_record(&id, &requester, clock),
            Lifecycle::Destroyed => {
                self.close_record(&id, &requester, clock);
                let inst = self.instances.get_mut(&id).expect("exists");
                if let Some(p) = inst.partition.take() {
                    if let Some(part) = self.partitions.get_mut(&p.node_id).and_then(|ps| ps.get_mut(p.index as usize)) {
                        part.release();
                    }
                    freed = true;
                }
            }
            _ => {}
        }
        freed
    }

    fn open_record(&mut self, id: &str, requester: &str, rate: u64, now: Tick) {
        if self.ledger.iter().any(|r| r.instance_id == id && r.stop_time.is_none()) {
            return;
        }
        self.ledger.push(AccountingRecord { instance_id: id.to_string(), start_time: now, stop_time: None, rate });
        self.outbox.push(SlapMessage::AccountingEvent {
            requester: requester.to_string(),
            instance_id: id.to_string(),
            edge: AccountingEdge::Open,
            tick: now,
            rate,
        });
    }

    fn close_record(&mut self, id: &str, requester: &str, now: Tick) {
        if let Some(r) = self.ledger.iter_mut().find(|r| r.instance_id == id && r.stop_time.is_none()) {
            r.stop_time = Some(now.max(r.start_time));
            let rate = r.rate;
            self.outbox.push(SlapMessage::AccountingEvent {
                requester: requester.to_string(),
                instance_id: id.to_string(),
                edge: AccountingEdge::Close,
                tick: now,
                rate,
            });
        }
    }

    /// Cost of `requester`'s usage within `[from, to)`. Open records count
    /// up to `to`.
    pub fn compute_invoice(&self, requester: &str, from: Tick, to: Tick) -> u64 {
        if to <= from {
            return 0;
        }
        self.ledger
            .iter()
            .filter(|r| self.instances.get(&r.instance_id).is_some_and(|i| i.requester == requester))
            .map(|r| r.cost_within(from, to))
            .sum()
    }

    pub fn view(&self, id: &str) -> Option<InstanceView> {
        let inst = self.instances.get(id)?;
        Some(InstanceView {
            instance_id: inst.instance_id.clone(),
            reference: inst.reference.clone(),
            lifecycle: inst.lifecycle,
            node_id: inst.partition.as_ref().map(|p| p.node_id.clone()),
            partition_index: inst.partition.as_ref().map(|p| p.index),
            connection: inst.connection.clone(),
        })
    }

    /// Cross-checks the registry, partitions and instances.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut occupants = 0;
        let mut addresses = BTreeSet::new();
        for (node_id, parts) in &self.partitions {
            let node = self.nodes.get(node_id).ok_or(format!("partitions of unknown node {node_id}"))?;
            if node.partition_count as usize != parts.len() {
                return Err(format!("{node_id}: partition_count {} != {}", node.partition_count, parts.len()));
            }
            for p in parts {
                if !addresses.insert(p.ipv6_addr.clone()) {
                    return Err(format!("duplicate address {}", p.ipv6_addr));
                }
                if p.is_free() != p.occupant.is_none() {
                    return Err(format!("{node_id}/{}: state and occupant disagree", p.index));
                }
                if let Some(occ) = &p.occupant {
                    occupants += 1;
                    let inst = self.instances.get(occ).ok_or(format!("occupant {occ} unknown"))?;
                    let here = PartitionRef { node_id: node_id.clone(), index: p.index };
                    if inst.partition.as_ref() != Some(&here) {
                        return Err(format!("{occ} does not point back to {node_id}/{}", p.index));
                    }
                }
            }
        }
        let placed = self.instances.values().filter(|i| i.partition.is_some()).count();
        if placed != occupants {
            return Err(format!("{placed} placed instances but {occupants} occupied partitions"));
        }
        for inst in self.instances.values() {
            if let Some(p) = &inst.partition {
                // a later failed reinstall may drop the release from
                // installed_releases; the supply itself must remain
                if !self.supplies.contains(&(p.node_id.clone(), inst.release_url.clone())) {
                    return Err(format!("{} placed on {} without a supply of its release", inst.instance_id, p.node_id));
                }
                let held = self.partitions[&p.node_id].get(p.index as usize).and_then(|x| x.occupant.as_deref());
                if held != Some(inst.instance_id.as_str()) {
                    return Err(format!("{} not the occupant of its partition", inst.instance_id));
                }
            } else if matches!(inst.lifecycle, Lifecycle::Deploying | Lifecycle::Running | Lifecycle::Stopped) {
                return Err(format!("{} is {} without a partition", inst.instance_id, inst.lifecycle));
            }
        }
        for r in &self.ledger {
            if r.stop_time.is_some_and(|s| s < r.start_time) {
                return Err(format!("record of {} stops before it starts", r.instance_id));
            }
        }
        Ok(())
    }

    /// Processes one message and returns the reply.
    pub fn handle(&mut self, msg: SlapMessage) -> SlapMessage {
        let identity = msg.identity().to_string();
        let reply = match msg {
            SlapMessage::RegisterNode { node_id, credentials, partition_count } => {
                self.register_node(&node_id, &credentials, partition_count).map(|()| SlapMessage::ack(&node_id))
            }
            SlapMessage::Supply { node_id, release_url } => {
                self.supply(&release_url, &node_id).map(|()| SlapMessage::ack(&node_id))
            }
            SlapMessage::RequestInstance {
                requester,
                reference,
                release_url,
                instance_type,
                slapparameters,
                sla_node,
                state,
            } => self
                .request_instance(InstanceRequest {
                    requester: requester.clone(),
                    reference,
                    release_url,
                    instance_type,
                    slapparameters,
                    sla_node,
                    state,
                })
                .map(|inst| SlapMessage::InstanceStatus {
                    requester,
                    instance: self.view(&inst.instance_id).expect("just stored"),
                }),
            SlapMessage::GetTasks { node_id, tick } => {
                self.advance(tick);
                self.get_tasks(&node_id).map(|tasks| SlapMessage::TaskList { node_id, tasks })
            }
            SlapMessage::ReportInstall { node_id, tick, release_url, status } => {
                self.advance(tick);
                self.report_install(&node_id, &release_url, status).map(|()| SlapMessage::ack(&node_id))
            }
            SlapMessage::ReportState { node_id, tick, states } => {
                self.advance(tick);
                self.report_state(&node_id, &states).map(|()| SlapMessage::ack(&node_id))
            }
            other => Err(MasterError::BadRequest(format!("the master does not accept {}", other.kind()))),
        };
        reply.unwrap_or_else(|e| SlapMessage::error(&identity, e.code(), e.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("link i/o: {0}")]
    Io(#[from] io::Error),
}

/// A connection to the master.
pub trait MasterLink {
    fn call(&mut self, msg: &SlapMessage) -> Result<SlapMessage, LinkError>;
}

/// Same-process link. Requests and replies go through the wire encoding
/// and are recorded to the trace.
pub struct InProcess<'a> {
    pub master: &'a mut Master,
    pub trace: Option<&'a Trace>,
}

impl<'a> InProcess<'a> {
    pub fn new(master: &'a mut Master, trace: Option<&'a Trace>) -> Self {
        InProcess { master, trace }
    }
}

impl MasterLink for InProcess<'_> {
    fn call(&mut self, msg: &SlapMessage) -> Result<SlapMessage, LinkError> {
        let bytes = encode_message(msg);
        if let Some(t) = self.trace {
            t.record_bytes(&bytes);
        }
        let reply = self.master.handle(decode_message(&bytes)?);
        let reply_bytes = encode_message(&reply);
        let events = self.master.take_events();
        if let Some(t) = self.trace {
            t.record_bytes(&reply_bytes);
            for event in &events {
                t.record(event);
            }
        }
        Ok(decode_message(&reply_bytes)?)
    }
}

/// Line-delimited link over TCP.
pub struct SocketLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl SocketLink {
    pub fn connect(addr: &str) -> io::Result<Self> {
        let writer = TcpStream::connect(addr)?;
        let reader = BufReader::new(writer.try_clone()?);
        Ok(SocketLink { reader, writer })
    }
}

impl MasterLink for SocketLink {
    fn call(&mut self, msg: &SlapMessage) -> Result<SlapMessage, LinkError> {
        let mut bytes = encode_message(msg);
        bytes.push(b'\n');
        self.writer.write_all(&bytes)?;
        let mut line = String::new();
        self.reader.read_line(&mut line)?;
        Ok(decode_message(line.trim_end_matches('\n').as_bytes())?)
    }
}

/// Answers one connection until the peer closes it.
fn serve_connection(master: &Mutex<Master>, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match decode_message(line.as_bytes()) {
            Ok(msg) => master.lock().expect("master lock").handle(msg),
            Err(e) => SlapMessage::error("?", ErrorCode::BadRequest, e.to_string()),
        };
        let mut bytes = encode_message(&reply);
        bytes.push(b'\n');
        writer.write_all(&bytes)?;
    }
    Ok(())
}

/// Serves the master on `listener`, one thread per connection; messages are
/// applied one at a time under the lock. Stops after `max_connections`
/// connections have closed, if given.
pub fn serve(master: Arc<Mutex<Master>>, listener: TcpListener, max_connections: Option<usize>) -> io::Result<()> {
    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let master = Arc::clone(&master);
        handles.push(std::thread::spawn(move || {
            if let Err(e) = serve_connection(&master, stream) {
                log::warn!("connection closed with error: {e}");
            }
        }));
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(requester: &str, reference: &str, url: &str) -> InstanceRequest {
        InstanceRequest {
            requester: requester.into(),
            reference: reference.into(),
            release_url: url.into(),
            instance_type: "server".into(),
            slapparameters: Parameters::new(),
            sla_node: None,
            state: RequestedState::Started,
        }
    }

    fn installed(nodes: &[(&str, u32)], url: &str) -> Master {
        let mut m = Master::new();
        for (id, n) in nodes {
            m.register_node(id, "c", *n).unwrap();
            m.supply(url, id).unwrap();
            m.report_install(id, url, InstallStatus::Installed).unwrap();
        }
        m
    }

    #[test]
    fn register_materializes_partitions() {
        let mut m = Master::new();
        m.register_node("n1", "c", 10).unwrap();
        let roots: Vec<&str> = m.partitions["n1"].iter().map(|p| p.root_path.as_str()).collect();
        assert_eq!(roots.len(), 10);
        assert_eq!(roots[0], "/srv/slapgrid/slappart0");
        assert_eq!(roots[9], "/srv/slapgrid/slappart9");
        assert!(m.partitions["n1"].iter().all(|p| p.is_free()));
        m.register_node("n1", "c", 10).unwrap();
        assert_eq!(m.register_node("n1", "wrong", 10), Err(MasterError::Authentication("n1".into())));
        m.check_invariants().unwrap();
    }

    #[test]
    fn zero_capacity_node_keeps_requests_pending() {
        let mut m = installed(&[("n1", 0)], "u");
        let inst = m.request_instance(req("a", "r", "u")).unwrap();
        assert_eq!(inst.lifecycle, Lifecycle::Requested);
        assert_eq!(m.pending.len(), 1);
    }

    #[test]
    fn supply_is_a_set_and_checks_the_node() {
        let mut m = Master::new();
        m.register_node("n1", "c", 1).unwrap();
        m.supply("u", "n1").unwrap();
        m.supply("u", "n1").unwrap();
        assert_eq!(m.get_tasks("n1").unwrap(), [Task::Install { release_url: "u".into() }]);
        assert_eq!(m.supply("u", "n9"), Err(MasterError::UnknownNode("n9".into())));
    }

    #[test]
    fn empty_state_has_no_tasks() {
        let mut m = Master::new();
        m.register_node("n1", "c", 3).unwrap();
        assert!(m.get_tasks("n1").unwrap().is_empty());
        assert!(m.get_tasks("nx").is_err());
    }

    #[test]
    fn lowest_free_index_and_idempotent_requests() {
        let mut m = installed(&[("n1", 3)], "u");
        let a = m.request_instance(req("alice", "boinc1", "u")).unwrap();
        assert_eq!(a.partition, Some(PartitionRef { node_id: "n1".into(), index: 0 }));
        let again = m.request_instance(req("alice", "boinc1", "u")).unwrap();
        assert_eq!(again.instance_id, a.instance_id);
        assert_eq!(again.partition, a.partition);
        let b = m.request_instance(req("alice", "boinc2", "u")).unwrap();
        assert_eq!(b.partition.unwrap().index, 1);
        m.check_invariants().unwrap();
    }

    #[test]
    fn most_free_node_wins_then_name_order() {
        let mut m = installed(&[("b", 2), ("a", 2), ("c", 1)], "u");
        let order: Vec<String> =
            (0..5).map(|i| m.request_instance(req("x", &i.to_string(), "u")).unwrap().partition.unwrap().node_id).collect();
        assert_eq!(order, ["a", "b", "a", "b", "c"]);
    }

    #[test]
    fn pending_until_install_reported() {
        let mut m = Master::new();
        m.register_node("n1", "c", 2).unwrap();
        m.supply("u", "n1").unwrap();
        let inst = m.request_instance(req("a", "r", "u")).unwrap();
        assert_eq!(inst.lifecycle, Lifecycle::Requested);
        assert!(m.get_tasks("n1").unwrap().iter().all(|t| matches!(t, Task::Install { .. })));
        m.report_install("n1", "u", InstallStatus::Installed).unwrap();
        assert_eq!(m.instances[&inst.instance_id].lifecycle, Lifecycle::Allocated);
        let tasks = m.get_tasks("n1").unwrap();
        assert!(matches!(&tasks[..], [Task::Deploy { partition_index: 0, .. }]));
    }

    #[test]
    fn sla_filter() {
        let mut m = installed(&[("n1", 2), ("n2", 5)], "u");
        let mut r = req("a", "r", "u");
        r.sla_node = Some("n1".into());
        assert_eq!(m.request_instance(r.clone()).unwrap().partition.unwrap().node_id, "n1");
        r.sla_node = Some("ghost".into());
        r.reference = "r2".into();
        assert_eq!(m.request_instance(r), Err(MasterError::UnknownNode("ghost".into())));
    }

    fn running(m: &mut Master, node: &str, id: &str, at: Tick) {
        m.advance(at);
        let rep = InstanceReport { instance_id: id.into(), lifecycle: Lifecycle::Running, connection: Parameters::new() };
        m.report_state(node, &[rep]).unwrap();
    }

    fn with_lifecycle(m: &mut Master, node: &str, id: &str, at: Tick, lifecycle: Lifecycle) {
        m.advance(at);
        let rep = InstanceReport { instance_id: id.into(), lifecycle, connection: Parameters::new() };
        m.report_state(node, &[rep]).unwrap();
    }

    #[test]
    fn accounting_brackets_running_time() {
        let mut m = installed(&[("n1", 1)], "u");
        let id = m.request_instance(req("alice", "r", "u")).unwrap().instance_id;
        running(&mut m, "n1", &id, 10);
        with_lifecycle(&mut m, "n1", &id, 70, Lifecycle::Stopped);
        assert_eq!(m.ledger, [AccountingRecord { instance_id: id, start_time: 10, stop_time: Some(70), rate: 1 }]);
        assert_eq!(m.compute_invoice("alice", 0, 100), 60);
        assert_eq!(m.compute_invoice("bob", 0, 100), 0);
    }

    #[test]
    fn open_record_runs_to_period_end() {
        let mut m = installed(&[("n1", 1)], "u");
        let id = m.request_instance(req("alice", "r", "u")).unwrap().instance_id;
        running(&mut m, "n1", &id, 40);
        assert_eq!(m.compute_invoice("alice", 0, 100), 60);
        assert_eq!(Master::new().compute_invoice("alice", 0, 100), 0);
    }

    #[test]
    fn rogue_report_is_rejected() {
        let mut m = installed(&[("n1", 1), ("n2", 1)], "u");
        let id = m.request_instance(req("a", "r", "u")).unwrap().instance_id;
        let host = m.instances[&id].partition.clone().unwrap().node_id;
        let rogue = if host == "n1" { "n2" } else { "n1" };
        let rep = InstanceReport { instance_id: id.clone(), lifecycle: Lifecycle::Destroyed, connection: Parameters::new() };
        assert!(matches!(m.report_state(rogue, &[rep]), Err(MasterError::Consistency(_))));
        assert_eq!(m.instances[&id].lifecycle, Lifecycle::Allocated);
        m.check_invariants().unwrap();
    }

    #[test]
    fn destroy_frees_the_partition_for_pending_work() {
        let mut m = installed(&[("n1", 1)], "u");
        let a = m.request_instance(req("a", "r1", "u")).unwrap().instance_id;
        let b = m.request_instance(req("a", "r2", "u")).unwrap().instance_id;
        assert_eq!(m.instances[&b].lifecycle, Lifecycle::Requested);
        let mut destroy = req("a", "r1", "u");
        destroy.state = RequestedState::Destroyed;
        m.request_instance(destroy).unwrap();
        assert!(matches!(&m.get_tasks("n1").unwrap()[..], [Task::Destroy { .. }]));
        with_lifecycle(&mut m, "n1", &a, 5, Lifecycle::Destroyed);
        assert_eq!(m.instances[&a].partition, None);
        assert_eq!(m.instances[&b].partition, Some(PartitionRef { node_id: "n1".into(), index: 0 }));
        m.check_invariants().unwrap();
    }

    #[test]
    fn changed_parameters_trigger_redeploy() {
        let mut m = installed(&[("n1", 1)], "u");
        let id = m.request_instance(req("a", "r", "u")).unwrap().instance_id;
        m.get_tasks("n1").unwrap();
        running(&mut m, "n1", &id, 1);
        assert!(m.get_tasks("n1").unwrap().is_empty());
        let mut r = req("a", "r", "u");
        r.slapparameters.insert("k".into(), "v".into());
        m.request_instance(r).unwrap();
        assert!(matches!(&m.get_tasks("n1").unwrap()[..], [Task::Deploy { .. }]));
        assert!(m.get_tasks("n1").unwrap().is_empty());
    }

    #[test]
    fn silent_nodes_are_flagged_not_moved() {
        let mut m = installed(&[("n1", 1), ("n2", 1)], "u");
        let id = m.request_instance(req("a", "r", "u")).unwrap().instance_id;
        let host = m.instances[&id].partition.clone().unwrap().node_id;
        let other = if host == "n1" { "n2" } else { "n1" };
        m.advance(50);
        m.get_tasks(other).unwrap();
        assert!(m.stale.contains(&host));
        assert_eq!(m.stale_instances().len(), 1);
        assert_eq!(m.instances[&id].partition.as_ref().unwrap().node_id, host);
    }

    #[test]
    fn handle_speaks_messages() {
        let mut m = Master::new();
        let reply = m.handle(SlapMessage::RegisterNode { node_id: "n1".into(), credentials: "c".into(), partition_count: 1 });
        assert_eq!(reply, SlapMessage::ack("n1"));
        let reply = m.handle(SlapMessage::Supply { node_id: "n2".into(), release_url: "u".into() });
        assert!(matches!(reply, SlapMessage::Error { code: ErrorCode::UnknownNode, .. }));
        let reply = m.handle(SlapMessage::ack("x"));
        assert!(matches!(reply, SlapMessage::Error { code: ErrorCode::BadRequest, .. }));
    }

    #[test]
    fn socket_link_speaks_the_same_bytes() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let master = Arc::new(Mutex::new(Master::new()));
        let served = Arc::clone(&master);
        let server = std::thread::spawn(move || serve(served, listener, Some(1)));
        let mut link = SocketLink::connect(&addr).unwrap();
        let reply = link
            .call(&SlapMessage::RegisterNode { node_id: "n1".into(), credentials: "c".into(), partition_count: 2 })
            .unwrap();
        assert_eq!(reply, SlapMessage::ack("n1"));
        let tasks = link.call(&SlapMessage::GetTasks { node_id: "n1".into(), tick: 1 }).unwrap();
        assert_eq!(tasks, SlapMessage::TaskList { node_id: "n1".into(), tasks: vec![] });
        drop(link);
        server.join().unwrap().unwrap();
        assert_eq!(master.lock().unwrap().partitions["n1"].len(), 2);
    }
}
