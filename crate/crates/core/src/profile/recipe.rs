use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FetchError, InstallPlan, PartSpec, PlanTarget};
use crate::grid::{GridError, GridHost};
use crate::mac::{path_within, AccessDenied, AccessRequest, Enforcer, ObjectClass, Permission};
use crate::model::{Parameters, Tick};
use crate::node::{ProcessTable, ServiceSpec, SimFs};

/// Something a recipe produced under its target.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "artifact", rename_all = "snake_case")]
pub enum Artifact {
    File { path: String },
    Service { id: String },
    GridObject { kind: String, id: String, path: String },
}

impl Artifact {
    pub fn path(&self) -> Option<&str> {
        match self {
            Artifact::File { path } | Artifact::GridObject { path, .. } => Some(path),
            Artifact::Service { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecipeError {
    #[error("missing option `{0}`")]
    MissingOption(String),
    #[error("option `{option}` has invalid value `{value}`")]
    InvalidOption { option: String, value: String },
    #[error("write outside the target root: {0}")]
    OutsideTarget(String),
    #[error("no such file: {0}")]
    NoSuchFile(String),
    #[error(transparent)]
    Denied(#[from] AccessDenied),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecuteError {
    #[error("part `{part}` uses unregistered recipe `{recipe}`")]
    Unregistered { part: String, recipe: String },
    #[error("part `{part}` failed: {error}")]
    Part { part: String, error: RecipeError },
}

impl ExecuteError {
    pub fn part(&self) -> &str {
        match self {
            ExecuteError::Unregistered { part, .. } | ExecuteError::Part { part, .. } => part,
        }
    }
}

/// Everything a recipe may touch while installing one part.
pub struct TargetContext<'a> {
    pub target: PlanTarget,
    /// Discretionary identity: the system identity for software roots, the
    /// partition user for instances.
    pub identity: String,
    pub subject: String,
    pub parameters: Parameters,
    /// Instance being deployed, in the instance phase.
    pub instance_id: Option<String>,
    pub fs: &'a mut SimFs,
    pub enforcer: &'a mut Enforcer,
    pub fetch: &'a dyn super::Fetch,
    pub services: &'a mut ProcessTable,
    pub grid: &'a mut GridHost,
    /// Connection values the instance hands back to its requester.
    pub published: Parameters,
    pub now: Tick,
}

impl TargetContext<'_> {
    pub fn root(&self) -> &str {
        self.target.root()
    }

    pub fn partition(&self) -> Option<u32> {
        match self.target {
            PlanTarget::Partition { index, .. } => Some(index),
            PlanTarget::Software { .. } => None,
        }
    }

    fn check(&mut self, path: &str, permission: Permission) -> Result<(), RecipeError> {
        let req = AccessRequest::path(&self.subject, &self.identity, path, ObjectClass::File, permission, self.now);
        self.enforcer.check(req)?;
        Ok(())
    }

    /// Writes a file below the target root. Returns the artifact when the
    /// file is new or its content changed.
    pub fn write_file(&mut self, path: &str, content: &str) -> Result<Option<Artifact>, RecipeError> {
        if !path_within(path, self.root()) {
            return Err(RecipeError::OutsideTarget(path.to_string()));
        }
        self.check(path, Permission::Write)?;
        let changed = self.fs.write(path, &self.identity, content);
        Ok(changed.then(|| Artifact::File { path: path.to_string() }))
    }

    pub fn read_file(&mut self, path: &str) -> Result<String, RecipeError> {
        self.check(path, Permission::Read)?;
        self.fs.read(path).map(str::to_string).ok_or_else(|| RecipeError::NoSuchFile(path.to_string()))
    }

    /// Reads a local path from the node filesystem or fetches a URL.
    pub fn load(&mut self, location: &str) -> Result<String, RecipeError> {
        if location.starts_with('/') {
            self.read_file(location)
        } else {
            Ok(self.fetch.fetch(location)?)
        }
    }

    pub fn register_service(&mut self, spec: ServiceSpec) -> Option<Artifact> {
        let id = spec.service_id.clone();
        self.services.register(spec).then_some(Artifact::Service { id })
    }
}

/// Installs one kind of part. Running it again with unchanged options must
/// produce no new artifacts.
pub trait Recipe: Send + Sync {
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError>;
}

impl<F> Recipe for F
where
    F: Fn(&PartSpec, &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> + Send + Sync,
{
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> {
        self(part, ctx)
    }
}

pub fn require<'p>(part: &'p PartSpec, key: &str) -> Result<&'p str, RecipeError> {
    part.option(key).ok_or_else(|| RecipeError::MissingOption(key.to_string()))
}

#[derive(Clone, Default)]
pub struct RecipeRegistry {
    recipes: BTreeMap<String, Arc<dyn Recipe>>,
}

impl std::fmt::Debug for RecipeRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.recipes.keys()).finish()
    }
}

impl RecipeRegistry {
    pub fn new() -> Self {
        RecipeRegistry::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = RecipeRegistry::new();
        r.register("hexagonit.recipe.download", super::Download);
        r.register("slapos.recipe.cmmi", super::Cmmi);
        r.register("slapos.cookbook:mariadb", super::Mariadb);
        r.register("slapos.cookbook:boinc", crate::grid::BoincServerRecipe);
        r.register("slapos.cookbook:boinc-app", crate::grid::BoincAppRecipe);
        r.alias("slapos.cookbook:boinc.app", "slapos.cookbook:boinc-app");
        r.register("slapos.cookbook:boinc-client", crate::grid::BoincClientRecipe);
        r
    }

    pub fn register(&mut self, id: &str, recipe: impl Recipe + 'static) {
        self.recipes.insert(id.to_string(), Arc::new(recipe));
    }

    /// Makes `alias` name the behavior already registered as `id`.
    pub fn alias(&mut self, alias: &str, id: &str) {
        let recipe = self.recipes.get(id).unwrap_or_else(|| panic!("alias of unregistered recipe `{id}`")).clone();
        self.recipes.insert(alias.to_string(), recipe);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.recipes.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.recipes.keys().map(String::as_str)
    }

    /// Runs the plan's parts in order. Every recipe is looked up before
    /// anything runs; the first failing part aborts the rest.
    pub fn execute(&self, plan: &InstallPlan, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, ExecuteError> {
        let mut behaviors = Vec::with_capacity(plan.parts.len());
        for part in &plan.parts {
            let recipe = self.recipes.get(&part.recipe).ok_or_else(|| ExecuteError::Unregistered {
                part: part.name.clone(),
                recipe: part.recipe.clone(),
            })?;
            behaviors.push((part, recipe));
        }
        let mut artifacts = Vec::new();
        for (part, recipe) in behaviors {
            let produced =
                recipe.install(part, ctx).map_err(|error| ExecuteError::Part { part: part.name.clone(), error })?;
            artifacts.extend(produced);
        }
        Ok(artifacts)
    }
}
