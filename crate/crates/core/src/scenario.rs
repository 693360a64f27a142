//! Scenario files: nodes, supplies and requests for a simulation run,
//! written in the profile syntax.
//!
//! ```text
//! [scenario]
//! seed = 7
//! ticks = 40
//! confinement = on
//! mode = strict
//!
//! [node:n1]
//! credentials = secret
//! partitions = 4
//!
//! [supply:boinc]
//! url = http://example/software.cfg
//! nodes = n1
//!
//! [request:client]
//! requester = alice
//! release = boinc
//! type = client
//! count = 3
//! param.server-url = ${server:server-url}
//! ```
//!
//! `${name:key}` in a request parameter stands for connection parameter
//! `key` published by request `name`; the request is held back until that
//! value exists.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mac::Mode;
use crate::model::{Parameters, Tick};
use crate::profile::{parse_profile, words, ParseError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("[{section}] {option}: {message}")]
    Invalid { section: String, option: String, message: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
}

fn invalid(section: &str, option: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { section: section.to_string(), option: option.to_string(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub node_id: String,
    pub credentials: String,
    pub partitions: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupplySpec {
    pub name: String,
    pub url: String,
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub name: String,
    pub requester: String,
    pub reference: String,
    pub release_url: String,
    pub instance_type: String,
    pub sla_node: Option<String>,
    /// Raw values, possibly holding `${request:key}` references.
    pub parameters: Parameters,
}

impl RequestSpec {
    /// Requests whose connection parameters this one waits for.
    pub fn dependencies(&self) -> BTreeSet<String> {
        self.parameters.values().flat_map(|v| references(v)).map(|(name, _)| name).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub ticks: Tick,
    pub confinement: bool,
    pub mode: Mode,
    pub nodes: Vec<NodeSpec>,
    pub supplies: Vec<SupplySpec>,
    /// One entry per instance; `count = n` expands to `name-0 .. name-(n-1)`.
    pub requests: Vec<RequestSpec>,
}

/// `${name:key}` references in `value`.
pub fn references(value: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut rest = value;
    while let Some(start) = rest.find("${") {
        let body = &rest[start + 2..];
        let Some(end) = body.find('}') else { break };
        if let Some((name, key)) = body[..end].split_once(':') {
            out.push((name.trim().to_string(), key.trim().to_string()));
        }
        rest = &body[end + 1..];
    }
    out
}

/// Replaces every `${name:key}` in `value` using `lookup`. `None` if any
/// reference is still unknown.
pub fn substitute(value: &str, lookup: impl Fn(&str, &str) -> Option<String>) -> Option<String> {
    let mut out = String::new();
    let mut rest = value;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let body = &rest[start + 2..];
        let end = body.find('}')?;
        let (name, key) = body[..end].split_once(':')?;
        out.push_str(&lookup(name.trim(), key.trim())?);
        rest = &body[end + 1..];
    }
    out.push_str(rest);
    Some(out)
}

fn flag(section: &str, option: &str, value: &str) -> Result<bool, ScenarioError> {
    match value {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(invalid(section, option, format!("expected on/off, got `{value}`"))),
    }
}

fn number<T: std::str::FromStr>(section: &str, option: &str, value: &str) -> Result<T, ScenarioError> {
    value.parse().map_err(|_| invalid(section, option, format!("expected a number, got `{value}`")))
}

pub fn parse_scenario(text: &str, origin: &str) -> Result<Scenario, ScenarioError> {
    let profile = parse_profile(text, origin)?;
    let mut scenario = Scenario {
        seed: 0,
        ticks: 0,
        confinement: false,
        mode: Mode::Targeted,
        nodes: Vec::new(),
        supplies: Vec::new(),
        requests: Vec::new(),
    };
    let mut supplies: BTreeMap<String, String> = BTreeMap::new();

    for (name, options) in &profile.sections {
        let get = |key: &str| options.get(key).map(String::as_str);
        if name == "scenario" {
            for (key, value) in options {
                match key.as_str() {
                    "seed" => scenario.seed = number(name, key, value)?,
                    "ticks" => scenario.ticks = number(name, key, value)?,
                    "confinement" => scenario.confinement = flag(name, key, value)?,
                    "mode" => scenario.mode = value.parse().map_err(|_| invalid(name, key, "expected targeted or strict"))?,
                    _ => return Err(invalid(name, key, "unknown option")),
                }
            }
        } else if let Some(node_id) = name.strip_prefix("node:") {
            scenario.nodes.push(NodeSpec {
                node_id: node_id.to_string(),
                credentials: get("credentials").unwrap_or_default().to_string(),
                partitions: number(name, "partitions", get("partitions").unwrap_or("1"))?,
            });
        } else if let Some(supply) = name.strip_prefix("supply:") {
            let url = get("url").ok_or_else(|| invalid(name, "url", "missing"))?.to_string();
            let nodes = words(get("nodes").unwrap_or_default()).into_iter().map(str::to_string).collect();
            supplies.insert(supply.to_string(), url.clone());
            scenario.supplies.push(SupplySpec { name: supply.to_string(), url, nodes });
        } else if let Some(request) = name.strip_prefix("request:") {
            let release = get("release").ok_or_else(|| invalid(name, "release", "missing"))?;
            let release_url = supplies
                .get(release)
                .cloned()
                .or_else(|| release.contains("://").then(|| release.to_string()))
                .ok_or_else(|| invalid(name, "release", format!("no supply named `{release}`")))?;
            let count: u32 = number(name, "count", get("count").unwrap_or("1"))?;
            let parameters: Parameters = options
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("param.").map(|p| (p.to_string(), v.clone())))
                .collect();
            let reference = get("reference").unwrap_or(request);
            for i in 0..count {
                let (inst_name, inst_ref) = if count == 1 {
                    (request.to_string(), reference.to_string())
                } else {
                    (format!("{request}-{i}"), format!("{reference}-{i}"))
                };
                scenario.requests.push(RequestSpec {
                    name: inst_name,
                    requester: get("requester").unwrap_or("admin").to_string(),
                    reference: inst_ref,
                    release_url: release_url.clone(),
                    instance_type: get("type").unwrap_or("default").to_string(),
                    sla_node: get("sla-node").map(str::to_string),
                    parameters: parameters.clone(),
                });
            }
        } else {
            return Err(ScenarioError::UnknownSection(name.clone()));
        }
    }

    let known: BTreeSet<&str> = scenario.requests.iter().map(|r| r.name.as_str()).collect();
    for r in &scenario.requests {
        for dep in r.dependencies() {
            if !known.contains(dep.as_str()) {
                return Err(invalid(&format!("request:{}", r.name), "param", format!("unknown request `{dep}`")));
            }
        }
    }
    let node_ids: BTreeSet<&str> = scenario.nodes.iter().map(|n| n.node_id.as_str()).collect();
    for s in &scenario.supplies {
        if let Some(n) = s.nodes.iter().find(|n| !node_ids.contains(n.as_str())) {
            return Err(invalid(&format!("supply:{}", s.name), "nodes", format!("unknown node `{n}`")));
        }
    }
    Ok(scenario)
}
