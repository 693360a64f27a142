//! Buildout-style profiles: parsing, `extends` layering, macro and
//! `${section:option}` resolution, install plans and the recipe registry.

pub(crate) mod builtin;
mod merge;
mod plan;
pub(crate) mod recipe;
mod resolve;

pub use builtin::{Cmmi, Download, Mariadb};
pub use merge::{join_origin, merge_extends, Fetch, FetchError, MergeError};
pub use plan::{plan, InstallPlan, PartSpec, PlanError, PlanTarget};
pub use recipe::{Artifact, ExecuteError, Recipe, RecipeError, RecipeRegistry, TargetContext};
pub use resolve::{resolve, ResolveError};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Option name → raw value, in declaration order.
pub type Section = IndexMap<String, String>;

/// Option key produced by a `<= base` macro line.
pub const MACRO_KEY: &str = "<";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Profile {
    pub origin: String,
    pub sections: IndexMap<String, Section>,
}

impl Profile {
    pub fn new(origin: impl Into<String>) -> Self {
        Profile { origin: origin.into(), sections: IndexMap::new() }
    }

    pub fn get(&self, section: &str, option: &str) -> Option<&str> {
        self.sections.get(section)?.get(option).map(String::as_str)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.get(name)
    }

    pub fn set(&mut self, section: &str, option: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(option.to_string(), value.into());
    }

    /// Layers `top` over `self`: options override key by key, new sections
    /// are appended after the existing ones.
    pub fn overlay(&mut self, top: &Profile) {
        for (name, options) in &top.sections {
            let target = self.sections.entry(name.clone()).or_default();
            for (k, v) in options {
                target.insert(k.clone(), v.clone());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("duplicate section [{0}]")]
    DuplicateSection(String),
    #[error("duplicate option `{option}` in [{section}]")]
    DuplicateOption { section: String, option: String },
    #[error("option `{0}` outside any section")]
    OptionOutsideSection(String),
    #[error("malformed line: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{origin}:{line}: {kind}")]
pub struct ParseError {
    pub origin: String,
    pub line: usize,
    pub kind: ParseErrorKind,
}

/// Parses profile text.
///
/// Values are trimmed at both ends; an indented line continues the previous
/// value after a newline; lines starting with `#` are comments.
pub fn parse_profile(text: &str, origin: &str) -> Result<Profile, ParseError> {
    let mut profile = Profile::new(origin);
    let mut current: Option<String> = None;
    let mut last_option: Option<String> = None;

    for (i, raw) in text.lines().enumerate() {
        let err = |kind| ParseError { origin: origin.to_string(), line: i + 1, kind };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if raw.starts_with([' ', '\t']) {
            let (Some(section), Some(option)) = (&current, &last_option) else {
                return Err(err(ParseErrorKind::Malformed(format!("continuation line without an option: `{trimmed}`"))));
            };
            let value = profile.sections[section.as_str()].get_mut(option.as_str()).expect("last option exists");
            value.push('\n');
            value.push_str(trimmed);
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| err(ParseErrorKind::Malformed(format!("bad section header `{trimmed}`"))))?;
            if profile.sections.contains_key(name) {
                return Err(err(ParseErrorKind::DuplicateSection(name.to_string())));
            }
            profile.sections.insert(name.to_string(), Section::new());
            current = Some(name.to_string());
            last_option = None;
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(err(ParseErrorKind::Malformed(format!("expected `key = value`, got `{trimmed}`"))));
        };
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(err(ParseErrorKind::Malformed(format!("bad option name `{key}`"))));
        }
        let Some(section) = &current else {
            return Err(err(ParseErrorKind::OptionOutsideSection(key.to_string())));
        };
        let options = profile.sections.get_mut(section.as_str()).expect("current section exists");
        if options.contains_key(key) {
            return Err(err(ParseErrorKind::DuplicateOption { section: section.clone(), option: key.to_string() }));
        }
        options.insert(key.to_string(), value.trim().to_string());
        last_option = Some(key.to_string());
    }
    Ok(profile)
}

/// Canonical text form; `parse_profile` of the output yields the same sections.
pub fn serialize_profile(profile: &Profile) -> String {
    let mut out = String::new();
    for (i, (name, options)) in profile.sections.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("[{name}]\n"));
        for (key, value) in options {
            let mut lines = value.split('\n');
            let first = lines.next().unwrap_or_default();
            if key == MACRO_KEY {
                out.push_str(&format!("<= {first}"));
            } else if first.is_empty() {
                out.push_str(&format!("{key} ="));
            } else {
                out.push_str(&format!("{key} = {first}"));
            }
            out.push('\n');
            for line in lines {
                out.push_str("    ");
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    out
}

/// Whitespace-separated words of a value, e.g. a `parts` list.
pub fn words(value: &str) -> Vec<&str> {
    value.split_whitespace().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn parses_the_download_listing() {
        let p = parse_profile(fixtures::BOINC_APPLICATION_LISTING, "boinc-application.cfg").unwrap();
        assert_eq!(p.sections.len(), 1);
        let s = p.section("boinc-application").unwrap();
        assert_eq!(s["recipe"], "hexagonit.recipe.download");
        assert_eq!(s["url"], "${boinc:location}/libexec/examples/upper_case");
        assert_eq!(s["app-name"], "upper_case");
        assert_eq!(s["version"], "1.0");
        assert_eq!(s["exec-extension"], "");
        assert_eq!(s["platform"], "x86_64-pc-linux-gnu");
        assert_eq!(s["wu-name"], "simpletest");
        assert_eq!(s["wu-number"], "1");
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn parses_the_deploy_listing_macro_marker() {
        let p = parse_profile(fixtures::BOINC_APP_LISTING, "boinc-app.cfg").unwrap();
        let s = p.section("boinc-app").unwrap();
        assert_eq!(s.get_index(0).unwrap(), (&MACRO_KEY.to_string(), &"boinc-server".to_string()));
        assert_eq!(s["recipe"], "slapos.cookbook:boinc.app");
        assert_eq!(s["dash"], "${dash:location}/bin/dash");
    }

    #[test]
    fn empty_input_has_no_sections() {
        assert!(parse_profile("", "x").unwrap().sections.is_empty());
        assert!(parse_profile("\n# only a comment\n\n", "x").unwrap().sections.is_empty());
    }

    #[test]
    fn continuation_lines_join_with_newlines() {
        let p = parse_profile("[buildout]\nparts =\n  a\n# note\n\tb\nother = x  y \n", "x").unwrap();
        assert_eq!(p.get("buildout", "parts"), Some("\na\nb"));
        assert_eq!(p.get("buildout", "other"), Some("x  y"));
        assert_eq!(words(p.get("buildout", "parts").unwrap()), ["a", "b"]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases: [(&str, usize, fn(&ParseErrorKind) -> bool); 6] = [
            ("[a]\n[a]\n", 2, |k| matches!(k, ParseErrorKind::DuplicateSection(_))),
            ("[a]\nx = 1\nx = 2\n", 3, |k| matches!(k, ParseErrorKind::DuplicateOption { .. })),
            ("x = 1\n", 1, |k| matches!(k, ParseErrorKind::OptionOutsideSection(_))),
            ("[a]\njunk\n", 2, |k| matches!(k, ParseErrorKind::Malformed(_))),
            ("[a\n", 1, |k| matches!(k, ParseErrorKind::Malformed(_))),
            ("[a]\n  orphan\n", 2, |k| matches!(k, ParseErrorKind::Malformed(_))),
        ];
        for (text, line, check) in cases {
            let e = parse_profile(text, "t.cfg").unwrap_err();
            assert_eq!(e.line, line, "{text:?}");
            assert!(check(&e.kind), "{text:?}: {e}");
        }
    }

    #[test]
    fn serializer_output_reparses() {
        let text = fixtures::BOINC_APP_LISTING.to_string() + "\n[buildout]\nparts =\n  boinc-app\n";
        let p = parse_profile(&text, "x").unwrap();
        let again = parse_profile(&serialize_profile(&p), "x").unwrap();
        assert_eq!(p, again);
    }
}
