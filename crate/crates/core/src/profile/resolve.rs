use std::collections::HashMap;

use indexmap::IndexMap;
use thiserror::Error;

use super::{words, Profile, Section, MACRO_KEY};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("[{from}] inherits from missing section [{section}]")]
    MissingMacroBase { from: String, section: String },
    #[error("macro cycle: {}", .0.join(" -> "))]
    MacroCycle(Vec<String>),
    #[error("${{{section}:{option}}} referenced from {from} does not exist")]
    MissingReference { section: String, option: String, from: String },
    #[error("substitution cycle: {}", .0.join(" -> "))]
    SubstitutionCycle(Vec<String>),
}

/// Expands `<= base` macros, then substitutes every `${section:option}`
/// token. Parts listed in `[buildout] parts` get an explicit `location`
/// (`<buildout:directory>/parts/<name>`) when they do not set one.
pub fn resolve(profile: &Profile) -> Result<Profile, ResolveError> {
    let mut expanded = IndexMap::new();
    let mut visiting = Vec::new();
    for name in profile.sections.keys() {
        expand_macros(profile, name, &mut expanded, &mut visiting)?;
    }
    // keep declaration order
    let expanded: IndexMap<String, Section> =
        profile.sections.keys().map(|n| (n.clone(), expanded.shift_remove(n).unwrap_or_default())).collect();

    let mut resolver = Resolver { sections: &expanded, cache: HashMap::new(), stack: Vec::new() };
    let mut out = Profile::new(profile.origin.clone());
    for (name, options) in &expanded {
        let mut section = Section::new();
        for key in options.keys() {
            let value = resolver.value(name, key, None)?;
            section.insert(key.clone(), value);
        }
        out.sections.insert(name.clone(), section);
    }
    let parts: Vec<String> = out
        .get("buildout", "parts")
        .map(|p| words(p).into_iter().map(str::to_string).collect())
        .unwrap_or_default();
    for part in parts {
        if out.sections.get(&part).is_some_and(|s| !s.contains_key("location")) {
            let location = resolver.value(&part, "location", None)?;
            out.sections[part.as_str()].insert("location".into(), location);
        }
    }
    Ok(out)
}

fn expand_macros(
    profile: &Profile,
    name: &str,
    done: &mut IndexMap<String, Section>,
    visiting: &mut Vec<String>,
) -> Result<(), ResolveError> {
    if done.contains_key(name) {
        return Ok(());
    }
    if let Some(pos) = visiting.iter().position(|v| v == name) {
        let mut chain = visiting[pos..].to_vec();
        chain.push(name.to_string());
        return Err(ResolveError::MacroCycle(chain));
    }
    let own = &profile.sections[name];
    let Some(bases) = own.get(MACRO_KEY) else {
        done.insert(name.to_string(), own.clone());
        return Ok(());
    };
    visiting.push(name.to_string());
    let mut section = Section::new();
    for base in words(bases) {
        if !profile.sections.contains_key(base) {
            return Err(ResolveError::MissingMacroBase { from: name.to_string(), section: base.to_string() });
        }
        expand_macros(profile, base, done, visiting)?;
        for (k, v) in &done[base] {
            section.insert(k.clone(), v.clone());
        }
    }
    visiting.pop();
    for (k, v) in own {
        if k != MACRO_KEY {
            section.insert(k.clone(), v.clone());
        }
    }
    done.insert(name.to_string(), section);
    Ok(())
}

struct Resolver<'a> {
    sections: &'a IndexMap<String, Section>,
    cache: HashMap<(String, String), String>,
    stack: Vec<(String, String)>,
}

impl Resolver<'_> {
    fn value(&mut self, section: &str, option: &str, from: Option<&str>) -> Result<String, ResolveError> {
        let key = (section.to_string(), option.to_string());
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        if let Some(pos) = self.stack.iter().position(|k| *k == key) {
            let mut chain: Vec<String> = self.stack[pos..].iter().map(|(s, o)| format!("{s}:{o}")).collect();
            chain.push(format!("{section}:{option}"));
            return Err(ResolveError::SubstitutionCycle(chain));
        }
        let raw = match self.sections.get(section).and_then(|s| s.get(option)) {
            Some(raw) => raw.clone(),
            None if option == "location" && self.sections.contains_key(section) => {
                format!("${{buildout:directory}}/parts/{section}")
            }
            None if section == "buildout" && option == "directory" => ".".to_string(),
            None => {
                return Err(ResolveError::MissingReference {
                    section: section.to_string(),
                    option: option.to_string(),
                    from: from.unwrap_or("?").to_string(),
                })
            }
        };
        self.stack.push(key.clone());
        let here = format!("{section}:{option}");
        let resolved = self.substitute(&raw, &here);
        self.stack.pop();
        let resolved = resolved?;
        self.cache.insert(key, resolved.clone());
        Ok(resolved)
    }

    fn substitute(&mut self, raw: &str, here: &str) -> Result<String, ResolveError> {
        let mut out = String::with_capacity(raw.len());
        let mut rest = raw;
        while let Some(start) = rest.find("${") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            match parse_token(after) {
                Some((section, option, len)) => {
                    out.push_str(&self.value(section, option, Some(here))?);
                    rest = &after[len..];
                }
                None => {
                    out.push_str("${");
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')
}

/// Parses `section:option}` at the start of `s`, returning the names and the
/// consumed length.
fn parse_token(s: &str) -> Option<(&str, &str, usize)> {
    let close = s.find('}')?;
    let (section, option) = s[..close].split_once(':')?;
    let valid = |n: &str| !n.is_empty() && n.chars().all(is_name_char);
    (valid(section) && valid(option)).then_some((section, option, close + 1))
}
