//! Generic recipes: file download, simulated configure/make/make install,
//! and the database service placeholder.

use super::recipe::require;
use super::{words, Artifact, PartSpec, RecipeError, TargetContext};
use crate::mac::partition_subject_label;
use crate::node::{ServiceKind, ServiceSpec};

/// Absolute install directory of a part, from its `location` option.
pub fn part_location(part: &PartSpec, ctx: &TargetContext<'_>) -> String {
    let root = ctx.root().trim_end_matches('/');
    match part.option("location") {
        Some(loc) if loc.starts_with('/') => loc.to_string(),
        Some(loc) => format!("{root}/{}", loc.trim_start_matches("./")),
        None => format!("{root}/parts/{}", part.name),
    }
}

/// `hexagonit.recipe.download`: copies `url` to `<location>/<filename>`.
pub struct Download;

impl super::Recipe for Download {
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> {
        let url = require(part, "url")?;
        let filename = match part.option("filename") {
            Some(f) if !f.is_empty() => f,
            _ => url.rsplit('/').next().filter(|f| !f.is_empty()).ok_or_else(|| RecipeError::InvalidOption {
                option: "url".into(),
                value: url.into(),
            })?,
        };
        let content = ctx.load(url)?;
        let dest = format!("{}/{filename}", part_location(part, ctx));
        Ok(ctx.write_file(&dest, &content)?.into_iter().collect())
    }
}

/// `slapos.recipe.cmmi`: stands in for a source build. Every path listed in
/// `provides` is created under the part location.
pub struct Cmmi;

impl super::Recipe for Cmmi {
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> {
        let url = require(part, "url")?;
        let options = words(part.option("configure-options").unwrap_or_default()).join(" ");
        let location = part_location(part, ctx);
        let mut artifacts = Vec::new();
        for provided in words(part.option("provides").unwrap_or_default()) {
            let content = format!("simulated build\nsource: {url}\nconfigure: {options}\nfile: {provided}\n");
            artifacts.extend(ctx.write_file(&format!("{location}/{provided}"), &content)?);
        }
        Ok(artifacts)
    }
}

pub(crate) fn instance_partition(ctx: &TargetContext<'_>) -> Result<u32, RecipeError> {
    ctx.partition().ok_or_else(|| RecipeError::Failed("instance recipe used outside a partition".into()))
}

/// `slapos.cookbook:mariadb`: a database service placeholder.
pub struct Mariadb;

impl super::Recipe for Mariadb {
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> {
        let index = instance_partition(ctx)?;
        let data = require(part, "data-directory")?.to_string();
        let ipv4 = part.option("ipv4").unwrap_or("127.0.0.1").to_string();
        let root = ctx.root().to_string();
        let config = format!("{root}/etc/mariadb.cnf");
        let mut artifacts = Vec::new();
        artifacts.extend(ctx.write_file(&config, &format!("[mysqld]\nbind-address = {ipv4}\ndatadir = {data}\n"))?);
        artifacts.extend(ctx.write_file(&format!("{data}/ibdata1"), "")?);
        artifacts.extend(ctx.register_service(ServiceSpec {
            service_id: format!("slappart{index}-mariadb"),
            partition: index,
            kind: ServiceKind::Generic,
            binary: part.option("binary").map(str::to_string),
            config: Some(config),
            log: Some(format!("{root}/var/log/mariadb.log")),
            identity: ctx.identity.clone(),
            subject: partition_subject_label(index),
        }));
        ctx.published.insert("database-host".into(), ipv4);
        Ok(artifacts)
    }
}
