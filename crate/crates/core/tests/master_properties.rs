//! Directory invariants under random operation sequences.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use slapforge_core::master::{InstanceRequest, Master};
use slapforge_core::model::{derive_partition_identity, InstallStatus, Lifecycle, Parameters, PartitionRef, RequestedState};
use slapforge_core::wire::{InstanceReport, SlapMessage};

const RELEASES: [&str; 2] = ["http://r.example/a.cfg", "http://r.example/b.cfg"];

#[derive(Debug, Clone)]
enum Op {
    Register { node: usize, partitions: u32 },
    Supply { node: usize, release: usize },
    Install { node: usize, release: usize, ok: bool },
    Request { requester: usize, reference: usize, release: usize, state: RequestedState },
    Tasks { node: usize },
    Report { instance: usize, lifecycle: Lifecycle },
    Advance { by: u64 },
}

fn op() -> impl Strategy<Value = Op> {
    let state = prop_oneof![
        3 => Just(RequestedState::Started),
        1 => Just(RequestedState::Stopped),
        1 => Just(RequestedState::Destroyed),
    ];
    let lifecycle = prop_oneof![
        Just(Lifecycle::Deploying),
        Just(Lifecycle::Running),
        Just(Lifecycle::Stopped),
        Just(Lifecycle::Failed),
        Just(Lifecycle::Destroyed),
    ];
    prop_oneof![
        2 => (0..3usize, 1..4u32).prop_map(|(node, partitions)| Op::Register { node, partitions }),
        2 => (0..3usize, 0..2usize).prop_map(|(node, release)| Op::Supply { node, release }),
        2 => (0..3usize, 0..2usize, prop::bool::weighted(0.8)).prop_map(|(node, release, ok)| Op::Install { node, release, ok }),
        4 => (0..2usize, 0..5usize, 0..2usize, state)
            .prop_map(|(requester, reference, release, state)| Op::Request { requester, reference, release, state }),
        2 => (0..3usize).prop_map(|node| Op::Tasks { node }),
        4 => (0..12usize, lifecycle).prop_map(|(instance, lifecycle)| Op::Report { instance, lifecycle }),
        1 => (1..20u64).prop_map(|by| Op::Advance { by }),
    ]
}

fn node_id(n: usize) -> String {
    format!("n{n}")
}

fn apply(master: &mut Master, op: &Op) {
    // refusals are part of the protocol; only the resulting state is checked
    match op {
        Op::Register { node, partitions } => {
            let _ = master.register_node(&node_id(*node), "c", *partitions);
        }
        Op::Supply { node, release } => {
            let _ = master.supply(RELEASES[*release], &node_id(*node));
        }
        Op::Install { node, release, ok } => {
            let status = if *ok { InstallStatus::Installed } else { InstallStatus::Failed };
            let _ = master.report_install(&node_id(*node), RELEASES[*release], status);
        }
        Op::Request { requester, reference, release, state } => {
            let _ = master.request_instance(InstanceRequest {
                requester: format!("u{requester}"),
                reference: format!("r{reference}"),
                release_url: RELEASES[*release].into(),
                instance_type: "default".into(),
                slapparameters: Parameters::new(),
                sla_node: None,
                state: *state,
            });
        }
        Op::Tasks { node } => {
            let _ = master.get_tasks(&node_id(*node));
        }
        Op::Report { instance, lifecycle } => {
            let Some(inst) = master.instances.values().nth(*instance) else { return };
            let Some(p) = inst.partition.clone() else { return };
            let tick = master.clock;
            master.handle(SlapMessage::ReportState {
                node_id: p.node_id,
                tick,
                states: vec![InstanceReport { instance_id: inst.instance_id.clone(), lifecycle: *lifecycle, connection: Parameters::new() }],
            });
        }
        Op::Advance { by } => {
            let t = master.clock + by;
            master.advance(t);
        }
    }
}

/// Independent restatement of the directory invariants.
fn check(master: &Master) -> Result<(), TestCaseError> {
    let mut occupied = BTreeMap::new();
    let mut addresses = BTreeSet::new();
    for (node, parts) in &master.partitions {
        prop_assert_eq!(master.nodes[node].partition_count as usize, parts.len());
        for (i, p) in parts.iter().enumerate() {
            prop_assert_eq!(p.index as usize, i);
            let id = derive_partition_identity(p.index);
            prop_assert_eq!((&p.user_label, &p.tap_label, &p.root_path), (&id.user_label, &id.tap_label, &id.root_path));
            prop_assert!(addresses.insert(p.ipv6_addr.clone()), "address {} reused", p.ipv6_addr);
            if let Some(occ) = &p.occupant {
                occupied.insert(occ.clone(), PartitionRef { node_id: node.clone(), index: p.index });
            }
        }
    }
    let placed: BTreeMap<String, PartitionRef> =
        master.instances.values().filter_map(|i| i.partition.clone().map(|p| (i.instance_id.clone(), p))).collect();
    prop_assert_eq!(&placed, &occupied, "placement and occupancy disagree");

    let mut keys = BTreeSet::new();
    for inst in master.instances.values() {
        prop_assert!(keys.insert((&inst.requester, &inst.reference)), "duplicate request key");
        if matches!(inst.lifecycle, Lifecycle::Deploying | Lifecycle::Running | Lifecycle::Stopped) {
            prop_assert!(inst.partition.is_some(), "{} {:?} without partition", inst.instance_id, inst.lifecycle);
        }
        if inst.lifecycle != Lifecycle::Destroyed {
            if let Some(p) = &inst.partition {
                prop_assert!(master.supplies.contains(&(p.node_id.clone(), inst.release_url.clone())));
            }
        }
    }

    let mut by_instance: BTreeMap<&str, Vec<(u64, Option<u64>)>> = BTreeMap::new();
    for r in &master.ledger {
        if let Some(stop) = r.stop_time {
            prop_assert!(stop >= r.start_time);
        }
        by_instance.entry(&r.instance_id).or_default().push((r.start_time, r.stop_time));
    }
    for (id, mut spans) in by_instance {
        spans.sort();
        prop_assert!(spans.iter().filter(|(_, stop)| stop.is_none()).count() <= 1, "{} has two open records", id);
        for w in spans.windows(2) {
            prop_assert!(w[0].1.is_some_and(|stop| stop <= w[1].0), "{} overlapping records {:?}", id, w);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn directory_invariants_hold_after_every_operation(ops in prop::collection::vec(op(), 1..60)) {
        let mut master = Master::new();
        // where each instance was placed, and whether it was destroyed since
        let mut homes: BTreeMap<String, PartitionRef> = BTreeMap::new();
        for op in &ops {
            apply(&mut master, op);
            check(&master)?;
            for inst in master.instances.values() {
                match (&inst.partition, homes.get(&inst.instance_id)) {
                    (Some(now), Some(before)) => prop_assert_eq!(now, before, "{} moved", &inst.instance_id),
                    (Some(now), None) => {
                        let installed = master.nodes[&now.node_id].installed_releases.contains(&inst.release_url);
                        prop_assert!(installed, "{} placed on {} without its release", &inst.instance_id, &now.node_id);
                        homes.insert(inst.instance_id.clone(), now.clone());
                    }
                    (None, Some(_)) => {
                        prop_assert_eq!(inst.lifecycle, Lifecycle::Destroyed, "{} lost its partition", &inst.instance_id);
                    }
                    (None, None) => {}
                }
            }
        }
        prop_assert_eq!(master.check_invariants(), Ok(()));
    }

    #[test]
    fn rerequesting_never_allocates_twice(repeats in 1..10usize, partitions in 1..5u32) {
        let mut master = Master::new();
        master.register_node("n0", "c", partitions).unwrap();
        master.supply(RELEASES[0], "n0").unwrap();
        master.report_install("n0", RELEASES[0], InstallStatus::Installed).unwrap();
        let mut ids = BTreeSet::new();
        for _ in 0..repeats {
            let inst = master.request_instance(InstanceRequest {
                requester: "u".into(),
                reference: "same".into(),
                release_url: RELEASES[0].into(),
                instance_type: "default".into(),
                slapparameters: Parameters::new(),
                sla_node: None,
                state: RequestedState::Started,
            }).unwrap();
            ids.insert(inst.instance_id);
        }
        prop_assert_eq!(ids.len(), 1);
        let used = master.partitions["n0"].iter().filter(|p| p.occupant.is_some()).count();
        prop_assert_eq!(used, 1);
    }
}
