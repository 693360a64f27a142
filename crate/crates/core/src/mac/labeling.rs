use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::policy::{partition_object_label, Permission, BASE_LABEL, SOFTWARE_LABEL};
use crate::model::{derive_partition_identity, partition_index_of_path, ROOT_IDENTITY, SOFTWARE_ROOT_BASE, SYSTEM_IDENTITY};

/// Security context of a filesystem object: its type label plus the
/// owner and world bits the discretionary layer looks at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectContext {
    pub label: String,
    pub owner: String,
    pub world: BTreeSet<Permission>,
}

/// Labeling rule by path prefix: partition trees, software roots, base system.
pub fn label_path(path: &str) -> ObjectContext {
    if let Some(n) = partition_index_of_path(path) {
        return ObjectContext {
            label: partition_object_label(n),
            owner: derive_partition_identity(n).user_label,
            world: BTreeSet::new(),
        };
    }
    let world = BTreeSet::from([Permission::Read, Permission::Execute]);
    if super::policy::path_within(path, SOFTWARE_ROOT_BASE) {
        ObjectContext { label: SOFTWARE_LABEL.to_string(), owner: SYSTEM_IDENTITY.to_string(), world }
    } else {
        ObjectContext { label: BASE_LABEL.to_string(), owner: ROOT_IDENTITY.to_string(), world }
    }
}

/// Path to context map. Lookups fall back to the nearest labeled ancestor
/// so new files inherit the label of their directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    entries: BTreeMap<String, ObjectContext>,
    /// Label paths missing from `entries` with [`label_path`] instead of
    /// reporting them unlabeled.
    rule_fallback: bool,
}

impl Labeling {
    /// Labels every given path, each of its ancestor directories, each
    /// partition root and the software base directory.
    pub fn from_paths<'a>(
        paths: impl IntoIterator<Item = &'a str>,
        partition_roots: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut labeling = Labeling::default();
        labeling.add(SOFTWARE_ROOT_BASE);
        for root in partition_roots {
            labeling.add(root);
        }
        for path in paths {
            let mut current = path.trim_end_matches('/');
            while !current.is_empty() {
                labeling.add(current);
                match current.rfind('/') {
                    Some(i) => current = &current[..i],
                    None => break,
                }
            }
        }
        labeling
    }

    /// Labeling that applies [`label_path`] to any path; used to replay traces
    /// without a filesystem snapshot.
    pub fn by_rule() -> Self {
        Labeling { entries: BTreeMap::new(), rule_fallback: true }
    }

    pub fn add(&mut self, path: &str) {
        if !self.entries.contains_key(path) {
            self.entries.insert(path.to_string(), label_path(path));
        }
    }

    pub fn lookup(&self, path: &str) -> Option<ObjectContext> {
        let mut current = path.trim_end_matches('/');
        loop {
            if let Some(ctx) = self.entries.get(current) {
                return Some(ctx.clone());
            }
            match current.rfind('/') {
                Some(i) if i > 0 => current = &current[..i],
                _ => break,
            }
        }
        self.rule_fallback.then(|| label_path(path))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
