use std::collections::BTreeMap;

use super::{account_key, project_url, AppVersion, Project, ADMIN_ACCOUNT};
use crate::mac::{partition_subject_label, path_within};
use crate::node::{ServiceKind, ServiceSpec};
use crate::profile::builtin::instance_partition;
use crate::profile::recipe::require;
use crate::profile::{Artifact, PartSpec, Recipe, RecipeError, TargetContext};

fn parameter_or_option(ctx: &TargetContext<'_>, part: &PartSpec, key: &str) -> Option<String> {
    ctx.parameters
        .get(key)
        .map(String::as_str)
        .or_else(|| part.option(key))
        .filter(|v| !v.is_empty())
        .map(str::to_string)
}

/// `slapos.cookbook:boinc`: an empty project plus its server service.
pub struct BoincServerRecipe;

impl Recipe for BoincServerRecipe {
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> {
        let index = instance_partition(ctx)?;
        let root = ctx.root().to_string();
        let name = parameter_or_option(ctx, part, "project-name")
            .ok_or_else(|| RecipeError::MissingOption("project-name".into()))?;
        let db_name = parameter_or_option(ctx, part, "db-name").unwrap_or_else(|| format!("{name}_db"));
        let ipv6 = require(part, "ipv6")?;
        let installation = part.option("installation-dir").map_or_else(|| format!("{root}/srv/boinc"), str::to_string);
        let directory = format!("{installation}/{name}");
        if !path_within(&directory, &root) {
            return Err(RecipeError::OutsideTarget(directory));
        }
        let url = project_url(ipv6, &name);

        let mut artifacts = Vec::new();
        match ctx.grid.projects.get_mut(&url) {
            Some(existing) if existing.db_name == db_name => {}
            Some(existing) => existing.db_name = db_name.clone(),
            None => {
                ctx.grid.projects.insert(url.clone(), Project::new(&name, &db_name, &url, &root, &directory));
                artifacts.push(Artifact::GridObject { kind: "project".into(), id: name.clone(), path: directory.clone() });
            }
        }
        let key = account_key(&url, ADMIN_ACCOUNT);
        artifacts.extend(ctx.write_file(
            &format!("{directory}/config.xml"),
            &format!("<boinc>\n  <name>{name}</name>\n  <db_name>{db_name}</db_name>\n  <url>{url}</url>\n</boinc>\n"),
        )?);
        let config = format!("{root}/etc/boinc-server.conf");
        artifacts.extend(ctx.write_file(&config, &format!("url = {url}\ndb-name = {db_name}\ndirectory = {directory}\n"))?);
        artifacts.extend(ctx.register_service(ServiceSpec {
            service_id: format!("slappart{index}-boinc-server"),
            partition: index,
            kind: ServiceKind::GridServer { server_url: url.clone() },
            binary: part.option("server-binary").map(str::to_string),
            config: Some(config),
            log: Some(format!("{root}/var/log/boinc-server.log")),
            identity: ctx.identity.clone(),
            subject: partition_subject_label(index),
        }));
        ctx.published.insert("server-url".into(), url);
        ctx.published.insert("account-key".into(), key);
        ctx.published.insert("project-name".into(), name);
        Ok(artifacts)
    }
}

/// `slapos.cookbook:boinc-app`: an application version and its work units,
/// added to the project of the same partition.
pub struct BoincAppRecipe;

impl Recipe for BoincAppRecipe {
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> {
        instance_partition(ctx)?;
        let wu_number_raw = require(part, "wu-number")?;
        let wu_number: u32 = wu_number_raw.parse().map_err(|_| RecipeError::InvalidOption {
            option: "wu-number".into(),
            value: wu_number_raw.into(),
        })?;
        let input_file = require(part, "input-file")?.to_string();
        let mut read_opt = |key: &str| -> Result<String, RecipeError> {
            match part.option(key) {
                Some(path) if !path.is_empty() => ctx.read_file(path),
                _ => Ok(String::new()),
            }
        };
        let template_result = read_opt("template-result")?;
        let template_wu = read_opt("template-wu")?;
        let input = ctx.read_file(&input_file)?;
        let app = AppVersion {
            app_name: require(part, "app-name")?.to_string(),
            version: require(part, "version")?.to_string(),
            platform: require(part, "platform")?.to_string(),
            exec_extension: part.option("extension").unwrap_or_default().to_string(),
            binary: require(part, "binary")?.to_string(),
            template_result,
            template_wu,
            dash: part.option("dash").unwrap_or_default().to_string(),
            wu_name: require(part, "wu-name")?.to_string(),
            part: part.name.clone(),
        };
        let metadata: BTreeMap<String, String> = ["template-wu", "template-result", "input-file"]
            .iter()
            .filter_map(|k| part.option(k).map(|v| (k.to_string(), v.to_string())))
            .collect();

        let root = ctx.root().to_string();
        let project = ctx
            .grid
            .project_in_mut(&root)
            .ok_or_else(|| RecipeError::Failed(format!("no BOINC project in {root}")))?;
        let app_name = app.app_name.clone();
        let wu_name = app.wu_name.clone();
        let changed = project.add_app(app)?;
        let created = project.ensure_work_units(&app_name, &wu_name, wu_number, &input, &metadata)?;
        let directory = project.directory.clone();

        let mut artifacts = Vec::new();
        if changed {
            artifacts.push(Artifact::GridObject {
                kind: "app".into(),
                id: app_name.clone(),
                path: format!("{directory}/apps/{app_name}"),
            });
        }
        for wu_id in created {
            let path = format!("{directory}/download/{wu_id}");
            artifacts.extend(ctx.write_file(&path, &input)?);
            artifacts.push(Artifact::GridObject { kind: "workunit".into(), id: wu_id, path });
        }
        Ok(artifacts)
    }
}

/// `slapos.cookbook:boinc-client`: a compute client attached to a server
/// given by url and account key.
pub struct BoincClientRecipe;

impl Recipe for BoincClientRecipe {
    fn install(&self, part: &PartSpec, ctx: &mut TargetContext<'_>) -> Result<Vec<Artifact>, RecipeError> {
        let index = instance_partition(ctx)?;
        let root = ctx.root().to_string();
        let server_url = require(part, "server-url")?.to_string();
        let account_key = require(part, "account-key")?.to_string();
        let platform = require(part, "platform")?.to_string();
        let client_id = ctx.instance_id.clone().unwrap_or_else(|| format!("slappart{index}"));
        let config = format!("{root}/etc/boinc-client.conf");
        let mut artifacts = Vec::new();
        artifacts.extend(ctx.write_file(
            &config,
            &format!("server-url = {server_url}\naccount-key = {account_key}\nplatform = {platform}\n"),
        )?);
        artifacts.extend(ctx.register_service(ServiceSpec {
            service_id: format!("slappart{index}-boinc-client"),
            partition: index,
            kind: ServiceKind::GridClient { server_url, account_key, platform, client_id: client_id.clone() },
            binary: part.option("binary").map(str::to_string),
            config: Some(config),
            log: Some(format!("{root}/var/log/boinc-client.log")),
            identity: ctx.identity.clone(),
            subject: partition_subject_label(index),
        }));
        ctx.published.insert("client-id".into(), client_id);
        Ok(artifacts)
    }
}
