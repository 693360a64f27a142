//! Decision properties of the type-enforcement layer over random policies
//! and requests.

use proptest::prelude::*;

use slapforge_core::mac::{
    check_access, generate_agent_policy, generate_partition_policy, label_path, partition_object_label, partition_subject_label,
    path_within, AccessObject, AccessRequest, AllowRule, Decision, DenyReason, Labeling, Mode, ObjectClass, Permission, Policy,
    AGENT_SUBJECT, BASE_LABEL, SOFTWARE_LABEL,
};
use slapforge_core::model::{derive_partition_identity, partition_index_of_path, ROOT_IDENTITY, SYSTEM_IDENTITY};

const PARTITIONS: u32 = 4;

const FILES: &[&str] = &[
    "/etc/passwd",
    "/etc/hosts",
    "/usr/bin/python",
    "/opt/slapgrid/0a1b/parts/mariadb/bin/mysqld",
    "/opt/slapgrid/0a1b/parts/boinc/bin/boinc_client",
    "/opt/slapgrid/9f8e/parts/apache/bin/httpd",
];

const PARTITION_SUBPATHS: &[&str] = &["", "etc/app.cfg", "srv/data", "var/log/app.log", "bin/run", "tmp"];

fn labeling() -> Labeling {
    let roots: Vec<String> = (0..PARTITIONS).map(|p| derive_partition_identity(p).root_path).collect();
    let mut files: Vec<String> = FILES.iter().map(|f| f.to_string()).collect();
    for root in &roots {
        files.extend(PARTITION_SUBPATHS.iter().filter(|s| !s.is_empty()).map(|s| format!("{root}/{s}")));
    }
    Labeling::from_paths(files.iter().map(String::as_str), roots.iter().map(String::as_str))
}

fn subject() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => (0..PARTITIONS).prop_map(partition_subject_label),
        2 => Just(AGENT_SUBJECT.to_string()),
        1 => Just("unconfined_t".to_string()),
    ]
}

fn identity() -> impl Strategy<Value = String> {
    prop_oneof![
        3 => Just(ROOT_IDENTITY.to_string()),
        1 => Just(SYSTEM_IDENTITY.to_string()),
        3 => (0..PARTITIONS).prop_map(|p| derive_partition_identity(p).user_label),
    ]
}

fn object_path() -> impl Strategy<Value = String> {
    prop_oneof![
        1 => prop::sample::select(FILES).prop_map(str::to_string),
        3 => (0..PARTITIONS, prop::sample::select(PARTITION_SUBPATHS)).prop_map(|(p, sub)| {
            let root = derive_partition_identity(p).root_path;
            if sub.is_empty() { root } else { format!("{root}/{sub}") }
        }),
        1 => Just("/nowhere/else".to_string()),
    ]
}

fn class() -> impl Strategy<Value = ObjectClass> {
    prop::sample::select(vec![ObjectClass::File, ObjectClass::Dir])
}

fn permission() -> impl Strategy<Value = Permission> {
    prop::sample::select(vec![Permission::Read, Permission::Write, Permission::Execute])
}

fn request() -> impl Strategy<Value = AccessRequest> {
    prop_oneof![
        6 => (subject(), identity(), object_path(), class(), permission())
            .prop_map(|(s, i, p, c, perm)| AccessRequest::path(&s, &i, &p, c, perm, 0)),
        1 => (subject(), identity(), 0..PARTITIONS)
            .prop_map(|(s, i, to)| AccessRequest::transition(&s, &i, &partition_subject_label(to), 0)),
    ]
}

fn object_label() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(BASE_LABEL.to_string()),
        Just(SOFTWARE_LABEL.to_string()),
        (0..PARTITIONS).prop_map(partition_object_label),
        (0..PARTITIONS).prop_map(partition_subject_label),
    ]
}

fn rule() -> impl Strategy<Value = AllowRule> {
    let class = prop::sample::select(ObjectClass::ALL.to_vec());
    let perms = prop::sample::subsequence(Permission::ALL.to_vec(), 1..=4);
    let scope = prop::option::weighted(0.3, object_path());
    (subject(), object_label(), class, perms, scope).prop_map(|(s, o, c, p, scope)| {
        let r = AllowRule::new(s, o, c, p);
        match scope {
            Some(scope) => r.under(scope),
            None => r,
        }
    })
}

fn policy() -> impl Strategy<Value = Policy> {
    let generated = prop::collection::vec((0..PARTITIONS, prop::option::of(prop::sample::select(FILES))), 0..6);
    let random = prop::collection::vec(rule(), 0..12);
    let labeled = prop::collection::vec(subject(), 0..4);
    let mode = prop::sample::select(vec![Mode::Targeted, Mode::Strict]);
    (generated, random, labeled, mode, any::<bool>()).prop_map(|(generated, random, labeled, mode, agent)| {
        let mut policy = Policy::new(mode);
        for (p, binary) in generated {
            policy.add_rules(generate_partition_policy(p, binary));
        }
        if agent {
            policy.add_rules(generate_agent_policy(PARTITIONS));
        }
        policy.add_rules(random);
        for s in labeled {
            policy.label_subject(s);
        }
        policy
    })
}

/// Oracle for the discretionary layer, from the labeling rule alone.
fn dac_oracle(request: &AccessRequest) -> bool {
    if request.identity == ROOT_IDENTITY {
        return true;
    }
    match &request.object {
        AccessObject::Domain(_) => false,
        AccessObject::Path(p) => {
            let ctx = label_path(p);
            ctx.owner == request.identity || ctx.world.contains(&request.permission)
        }
    }
}

fn grants(policy: &Policy, label: &str, request: &AccessRequest) -> bool {
    let path = match &request.object {
        AccessObject::Path(p) => Some(p.as_str()),
        AccessObject::Domain(_) => None,
    };
    policy.rules.iter().any(|r| r.grants(&request.subject, label, request.class, request.permission, path))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn every_decision_is_explained(policy in policy(), request in request()) {
        let labeling = labeling();
        let record = check_access(&policy, &labeling, &request);
        match record.decision {
            Decision::Allow => {
                prop_assert!(dac_oracle(&request));
                if policy.enforces(&request.subject) {
                    prop_assert!(record.mac_consulted);
                    let rule = record.matched_rule.as_ref().expect("allow under enforcement cites a rule");
                    prop_assert!(policy.rules.contains(rule));
                    let label = record.object_label.as_deref().unwrap();
                    let path = match &request.object { AccessObject::Path(p) => Some(p.as_str()), _ => None };
                    prop_assert!(rule.grants(&request.subject, label, request.class, request.permission, path));
                } else {
                    prop_assert!(!record.mac_consulted && record.matched_rule.is_none());
                }
            }
            Decision::Deny(reason) => {
                prop_assert!(record.matched_rule.is_none());
                match reason {
                    DenyReason::Dac => prop_assert!(!dac_oracle(&request)),
                    DenyReason::Unlabeled => prop_assert!(record.object_label.is_none()),
                    DenyReason::NoMatchingRule => {
                        prop_assert!(policy.enforces(&request.subject));
                        let label = record.object_label.as_deref().unwrap();
                        prop_assert!(!grants(&policy, label, &request));
                    }
                }
            }
        }
    }

    #[test]
    fn generated_policies_never_cross_partitions(
        installed in prop::collection::vec((0..PARTITIONS, prop::option::of(prop::sample::select(FILES))), 0..8),
        agent in any::<bool>(),
        request in request(),
    ) {
        let mut policy = Policy::new(Mode::Strict);
        for (p, binary) in installed {
            policy.add_rules(generate_partition_policy(p, binary));
        }
        if agent {
            policy.add_rules(generate_agent_policy(PARTITIONS));
        }
        let from = request.subject.strip_prefix("part_").and_then(|s| s.strip_suffix("_svc_t")).and_then(|n| n.parse::<u32>().ok());
        let to = match &request.object {
            AccessObject::Path(p) => partition_index_of_path(p),
            AccessObject::Domain(d) => d.strip_prefix("part_").and_then(|s| s.strip_suffix("_svc_t")).and_then(|n| n.parse().ok()),
        };
        if let (Some(from), Some(to)) = (from, to) {
            if from != to {
                let record = check_access(&policy, &labeling(), &request);
                prop_assert!(!record.decision.is_allow(), "{:?}", record);
            }
        }
    }

    #[test]
    fn removing_a_rule_never_grants(policy in policy(), pick in any::<prop::sample::Index>(), requests in prop::collection::vec(request(), 1..20)) {
        prop_assume!(!policy.rules.is_empty());
        let labeling = labeling();
        let victim = policy.rules.iter().nth(pick.index(policy.rules.len())).unwrap().clone();
        let mut smaller = policy.clone();
        prop_assert!(smaller.remove_rule(&victim));
        for request in &requests {
            let before = check_access(&policy, &labeling, request).decision;
            let after = check_access(&smaller, &labeling, request).decision;
            prop_assert!(before.is_allow() || !after.is_allow(), "removing {:?} allowed {:?}", victim, request);
        }
    }

    #[test]
    fn strict_allows_no_more_than_targeted(policy in policy(), requests in prop::collection::vec(request(), 1..20)) {
        let labeling = labeling();
        let mut targeted = policy.clone();
        targeted.mode = Mode::Targeted;
        let mut strict = policy;
        strict.mode = Mode::Strict;
        for request in &requests {
            if check_access(&strict, &labeling, request).decision.is_allow() {
                prop_assert!(check_access(&targeted, &labeling, request).decision.is_allow(), "{:?}", request);
            }
        }
    }

    #[test]
    fn scoped_rules_grant_only_inside_their_scope(rule in rule(), request in request()) {
        let path = match &request.object { AccessObject::Path(p) => Some(p.as_str()), _ => None };
        let label = match &request.object {
            AccessObject::Path(p) => label_path(p).label,
            AccessObject::Domain(d) => d.clone(),
        };
        if rule.grants(&request.subject, &label, request.class, request.permission, path) {
            if let Some(scope) = &rule.scope {
                prop_assert!(path.is_some_and(|p| path_within(p, scope)));
            }
        }
    }
}
