use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use super::labeling::Labeling;
use super::policy::{generate_agent_policy, generate_partition_policy, partition_subject_label, Mode, ObjectClass, Permission};
use super::{check_dac, AccessRequest, Enforcer};
use crate::model::{derive_partition_identity, ROOT_IDENTITY};

const SUBPATHS: [&str; 8] = [
    "",
    "etc/httpd.conf",
    "etc/boinc-server.conf",
    "var/log/httpd.log",
    "var/log/results.log",
    "srv/boinc/project.json",
    "srv/mariadb/ibdata1",
    "parts/boinc-app/upper_case",
];

/// `n` requests in which a partition service, already escalated to root,
/// reaches into a different partition. Deterministic in `seed`.
///
/// Needs at least two partitions.
pub fn cross_partition_requests(seed: u64, n: usize, partitions: u32) -> Vec<AccessRequest> {
    assert!(partitions >= 2, "cross-partition fuzz needs two partitions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let from = rng.gen_range(0..partitions);
            let mut to = rng.gen_range(0..partitions - 1);
            if to >= from {
                to += 1;
            }
            let subject = partition_subject_label(from);
            if rng.gen_ratio(1, 8) {
                return AccessRequest::transition(&subject, ROOT_IDENTITY, &partition_subject_label(to), i as u64);
            }
            let root = derive_partition_identity(to).root_path;
            let sub = SUBPATHS.choose(&mut rng).copied().unwrap_or_default();
            let path = if sub.is_empty() { root } else { format!("{root}/{sub}") };
            let class = if sub.is_empty() { ObjectClass::Dir } else { ObjectClass::File };
            let permission = *[Permission::Read, Permission::Write, Permission::Execute].choose(&mut rng).unwrap();
            AccessRequest::path(&subject, ROOT_IDENTITY, &path, class, permission, i as u64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzOutcome {
    pub allowed: usize,
    pub denied: usize,
}

/// Replays [`cross_partition_requests`] on a node with `partitions`
/// partitions. Confined: strict mode with the generated agent and partition
/// policies. Unconfined: only the discretionary layer is evaluated.
pub fn run_cross_partition_fuzz(seed: u64, n: usize, partitions: u32, confined: bool) -> FuzzOutcome {
    let mut enforcer = Enforcer::new(true, Mode::Strict);
    let roots: Vec<String> = (0..partitions).map(|p| derive_partition_identity(p).root_path).collect();
    let files: Vec<String> =
        roots.iter().flat_map(|r| SUBPATHS.iter().filter(|s| !s.is_empty()).map(move |s| format!("{r}/{s}"))).collect();
    enforcer.labeling = Labeling::from_paths(files.iter().map(String::as_str), roots.iter().map(String::as_str));
    enforcer.policy.add_rules(generate_agent_policy(partitions));
    for p in 0..partitions {
        enforcer.policy.add_rules(generate_partition_policy(p, None));
    }
    let mut outcome = FuzzOutcome { allowed: 0, denied: 0 };
    for request in cross_partition_requests(seed, n, partitions) {
        let allowed = if confined {
            enforcer.check(request).is_ok()
        } else {
            check_dac(&enforcer.labeling, &request).decision.is_allow()
        };
        if allowed {
            outcome.allowed += 1;
        } else {
            outcome.denied += 1;
        }
    }
    outcome
}
