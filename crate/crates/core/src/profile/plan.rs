use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{words, Profile, Section};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    pub recipe: String,
    pub options: Section,
}

impl PartSpec {
    pub fn option(&self, key: &str) -> Option<&str> {
        self.options.get(key).map(String::as_str)
    }
}

/// Where a plan installs: a software root (install phase) or a partition
/// (instance phase).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "target")]
pub enum PlanTarget {
    Software { root: String },
    Partition { index: u32, root: String },
}

impl PlanTarget {
    pub fn root(&self) -> &str {
        match self {
            PlanTarget::Software { root } | PlanTarget::Partition { root, .. } => root,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallPlan {
    pub parts: Vec<PartSpec>,
    pub target: PlanTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("profile has no [buildout] parts option")]
    NoParts,
    #[error("part `{0}` is listed but its section is missing")]
    MissingPart(String),
    #[error("part `{0}` has no recipe")]
    NoRecipe(String),
    #[error("part `{0}` is listed twice")]
    DuplicatePart(String),
}

/// One part per name in `[buildout] parts`, in the listed order.
pub fn plan(profile: &Profile, target: PlanTarget) -> Result<InstallPlan, PlanError> {
    let listed = profile.get("buildout", "parts").ok_or(PlanError::NoParts)?;
    let mut parts: Vec<PartSpec> = Vec::new();
    for name in words(listed) {
        if parts.iter().any(|p| p.name == name) {
            return Err(PlanError::DuplicatePart(name.to_string()));
        }
        let section = profile.section(name).ok_or_else(|| PlanError::MissingPart(name.to_string()))?;
        let recipe = section
            .get("recipe")
            .filter(|r| !r.is_empty())
            .ok_or_else(|| PlanError::NoRecipe(name.to_string()))?;
        parts.push(PartSpec { name: name.to_string(), recipe: recipe.clone(), options: section.clone() });
    }
    Ok(InstallPlan { parts, target })
}
