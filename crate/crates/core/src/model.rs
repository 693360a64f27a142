//! Shared domain vocabulary: nodes, partitions, releases, instances and
//! accounting records.
//!
//! Every type here is a plain value. Mutation happens inside the module that
//! owns the state store (the master, or a node agent).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Simulation time. One tick is the smallest unit of progress.
pub type Tick = u64;

/// Key/value parameters passed at request time (`slapparameter`).
pub type Parameters = BTreeMap<String, String>;

pub const PARTITION_ROOT_BASE: &str = "/srv/slapgrid/slappart";
pub const SOFTWARE_ROOT_BASE: &str = "/opt/slapgrid";

/// Identity used for the software install phase and for files of software roots.
pub const SYSTEM_IDENTITY: &str = "system";
pub const ROOT_IDENTITY: &str = "root";

/// The three names a partition derives from its index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionIdentity {
    pub user_label: String,
    pub tap_label: String,
    pub root_path: String,
}

pub fn derive_partition_identity(index: u32) -> PartitionIdentity {
    PartitionIdentity {
        user_label: format!("slapuser{index}"),
        tap_label: format!("slaptap{index}"),
        root_path: format!("{PARTITION_ROOT_BASE}{index}"),
    }
}

/// Inverse of the root path derivation, also accepting paths below the root.
pub fn partition_index_of_path(path: &str) -> Option<u32> {
    let rest = path.strip_prefix(PARTITION_ROOT_BASE)?;
    let digits_end = rest.find('/').unwrap_or(rest.len());
    let (digits, tail) = rest.split_at(digits_end);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    if !(tail.is_empty() || tail.starts_with('/')) {
        return None;
    }
    digits.parse().ok()
}

/// Install location of a software release. Only depends on the URL, so
/// repeated installs of one release land in the same tree.
pub fn software_install_root(url: &str) -> String {
    let digest = Sha256::digest(url.as_bytes());
    format!("{SOFTWARE_ROOT_BASE}/{}", hex::encode(digest))
}

/// IPv6 address of partition `index` on the node with registration ordinal `node_ordinal`.
pub fn synthetic_ipv6(node_ordinal: u32, index: u32) -> String {
    format!("fd00:51a9:{:x}:{:x}::{:x}", node_ordinal >> 16, node_ordinal & 0xffff, index + 1)
}

/// Private IPv4 address, drawn from 10.0.0.0/8 by the same scheme as [`synthetic_ipv6`].
///
/// Unique as long as `node_ordinal < 256` and `index < 65536`.
pub fn synthetic_ipv4(node_ordinal: u32, index: u32) -> String {
    format!("10.{}.{}.{}", node_ordinal & 0xff, (index >> 8) & 0xff, index & 0xff)
}

pub const MAX_NODES: u32 = 256;
pub const MAX_PARTITIONS_PER_NODE: u32 = 65536;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub credentials: String,
    /// Registration order, used to derive addresses.
    pub ordinal: u32,
    pub partition_count: u32,
    pub installed_releases: BTreeSet<String>,
    pub last_report_time: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionState {
    Free,
    Allocated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputerPartition {
    pub index: u32,
    pub user_label: String,
    pub tap_label: String,
    pub root_path: String,
    pub ipv6_addr: String,
    pub ipv4_local: String,
    pub state: PartitionState,
    pub occupant: Option<String>,
}

impl ComputerPartition {
    pub fn new(node_ordinal: u32, index: u32) -> Self {
        let id = derive_partition_identity(index);
        ComputerPartition {
            index,
            user_label: id.user_label,
            tap_label: id.tap_label,
            root_path: id.root_path,
            ipv6_addr: synthetic_ipv6(node_ordinal, index),
            ipv4_local: synthetic_ipv4(node_ordinal, index),
            state: PartitionState::Free,
            occupant: None,
        }
    }

    pub fn is_free(&self) -> bool {
        self.state == PartitionState::Free
    }

    pub fn occupy(&mut self, instance_id: &str) {
        self.state = PartitionState::Allocated;
        self.occupant = Some(instance_id.to_string());
    }

    pub fn release(&mut self) {
        self.state = PartitionState::Free;
        self.occupant = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstallStatus {
    Requested,
    Installing,
    Installed,
    Failed,
}

impl fmt::Display for InstallStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InstallStatus::Requested => "requested",
            InstallStatus::Installing => "installing",
            InstallStatus::Installed => "installed",
            InstallStatus::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftwareRelease {
    pub url: String,
    pub install_root: String,
    pub status: BTreeMap<String, InstallStatus>,
}

impl SoftwareRelease {
    pub fn new(url: &str) -> Self {
        SoftwareRelease { url: url.to_string(), install_root: software_install_root(url), status: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lifecycle {
    Requested,
    Allocated,
    Deploying,
    Running,
    Stopped,
    Failed,
    Destroyed,
}

impl Lifecycle {
    pub fn holds_partition(self) -> bool {
        !matches!(self, Lifecycle::Requested | Lifecycle::Destroyed)
    }
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Lifecycle::Requested => "requested",
            Lifecycle::Allocated => "allocated",
            Lifecycle::Deploying => "deploying",
            Lifecycle::Running => "running",
            Lifecycle::Stopped => "stopped",
            Lifecycle::Failed => "failed",
            Lifecycle::Destroyed => "destroyed",
        };
        f.write_str(s)
    }
}

/// The state a requester asks for. Maps to the lifecycle the node drives toward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestedState {
    #[default]
    Started,
    Stopped,
    Destroyed,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionRef {
    pub node_id: String,
    pub index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftwareInstance {
    pub instance_id: String,
    pub requester: String,
    pub reference: String,
    pub release_url: String,
    pub instance_type: String,
    pub slapparameters: Parameters,
    pub requested_state: RequestedState,
    pub partition: Option<PartitionRef>,
    pub lifecycle: Lifecycle,
    /// Values published by the deployed instance (e.g. server url, account key).
    pub connection: Parameters,
    /// Parameters changed since the last deployment was handed out.
    pub needs_redeploy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingRecord {
    pub instance_id: String,
    pub start_time: Tick,
    pub stop_time: Option<Tick>,
    pub rate: u64,
}

impl AccountingRecord {
    /// Cost of the part of this record that falls in `[from, to)`.
    /// An open record runs until `to`.
    pub fn cost_within(&self, from: Tick, to: Tick) -> u64 {
        let end = self.stop_time.unwrap_or(to).min(to);
        let start = self.start_time.max(from);
        end.saturating_sub(start) * self.rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn identity_examples() {
        let cases = [
            (0, "slapuser0", "slaptap0", "/srv/slapgrid/slappart0"),
            (17, "slapuser17", "slaptap17", "/srv/slapgrid/slappart17"),
            (199, "slapuser199", "slaptap199", "/srv/slapgrid/slappart199"),
        ];
        for (n, user, tap, root) in cases {
            let id = derive_partition_identity(n);
            assert_eq!(id.user_label, user);
            assert_eq!(id.tap_label, tap);
            assert_eq!(id.root_path, root);
        }
    }

    #[test]
    fn identity_is_injective_and_invertible() {
        let mut seen = HashSet::new();
        for n in 0..2000 {
            let id = derive_partition_identity(n);
            assert_eq!(partition_index_of_path(&id.root_path), Some(n));
            assert_eq!(partition_index_of_path(&format!("{}/etc/x", id.root_path)), Some(n));
            assert!(seen.insert(id.user_label));
        }
        assert_eq!(partition_index_of_path("/srv/slapgrid/slappart1x"), None);
        assert_eq!(partition_index_of_path("/srv/slapgrid/slappart"), None);
        assert_eq!(partition_index_of_path("/srv/slapgrid/slappart01"), None);
        assert_eq!(partition_index_of_path("/opt/slapgrid/abc"), None);
    }

    #[test]
    fn addresses_unique_at_desk_scale() {
        let mut v6 = HashSet::new();
        let mut v4 = HashSet::new();
        for node in 0..8 {
            for index in 0..300 {
                assert!(v6.insert(synthetic_ipv6(node, index)));
                assert!(v4.insert(synthetic_ipv4(node, index)));
            }
        }
    }

    #[test]
    fn install_root_depends_on_url_only() {
        let a = software_install_root("http://example/software.cfg");
        assert_eq!(a, software_install_root("http://example/software.cfg"));
        assert_ne!(a, software_install_root("http://example/other.cfg"));
        assert!(a.starts_with("/opt/slapgrid/"));
        assert_eq!(a.len(), "/opt/slapgrid/".len() + 64);
    }

    #[test]
    fn record_cost() {
        let closed = AccountingRecord { instance_id: "i".into(), start_time: 10, stop_time: Some(70), rate: 1 };
        assert_eq!(closed.cost_within(0, 100), 60);
        assert_eq!(closed.cost_within(20, 30), 10);
        assert_eq!(closed.cost_within(80, 100), 0);
        let open = AccountingRecord { instance_id: "i".into(), start_time: 40, stop_time: None, rate: 2 };
        assert_eq!(open.cost_within(0, 100), 120);
    }
}
