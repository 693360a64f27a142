use thiserror::Error;

use super::{parse_profile, words, ParseError, Profile};

/// Source of profile text by origin (URL or path).
pub trait Fetch {
    fn fetch(&self, origin: &str) -> Result<String, FetchError>;
}

impl<F> Fetch for F
where
    F: Fn(&str) -> Option<String>,
{
    fn fetch(&self, origin: &str) -> Result<String, FetchError> {
        self(origin).ok_or_else(|| FetchError(origin.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot fetch `{0}`")]
pub struct FetchError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MergeError {
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("extends cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
}

/// Resolves `rel` against the directory of `origin`. Absolute paths and
/// URLs are returned as they are; `.` and `..` segments are folded.
pub fn join_origin(origin: &str, rel: &str) -> String {
    if rel.contains("://") || rel.starts_with('/') {
        return rel.to_string();
    }
    let (prefix, path) = match origin.find("://") {
        Some(i) => {
            let after = &origin[i + 3..];
            let host_end = after.find('/').map_or(origin.len(), |j| i + 3 + j);
            (&origin[..host_end], &origin[host_end..])
        }
        None => ("", origin),
    };
    let dir = path.rfind('/').map_or("", |i| &path[..i]);
    let absolute = path.starts_with('/') || !prefix.is_empty();
    let mut segments: Vec<&str> = dir.split('/').filter(|s| !s.is_empty()).collect();
    for seg in rel.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                if segments.last().is_some_and(|s| *s != "..") {
                    segments.pop();
                } else if !absolute {
                    segments.push("..");
                }
            }
            s => segments.push(s),
        }
    }
    let joined = segments.join("/");
    if absolute {
        format!("{prefix}/{joined}")
    } else {
        joined
    }
}

/// Merges every profile named by `[buildout] extends`, depth first.
///
/// Bases are layered in the order listed and the extending profile goes on
/// top; options override key by key. The `extends` option is consumed.
pub fn merge_extends(profile: Profile, fetch: &dyn Fetch) -> Result<Profile, MergeError> {
    let mut stack = vec![profile.origin.clone()];
    expand(profile, fetch, &mut stack)
}

fn expand(mut profile: Profile, fetch: &dyn Fetch, stack: &mut Vec<String>) -> Result<Profile, MergeError> {
    let extends = profile
        .sections
        .get_mut("buildout")
        .and_then(|s| s.shift_remove("extends"))
        .unwrap_or_default();
    let bases: Vec<String> = words(&extends).into_iter().map(|b| join_origin(&profile.origin, b)).collect();
    if bases.is_empty() {
        return Ok(profile);
    }
    let mut merged = Profile::new(profile.origin.clone());
    for base in bases {
        if stack.contains(&base) {
            let mut chain = stack.clone();
            chain.push(base);
            return Err(MergeError::Cycle(chain));
        }
        let text = fetch.fetch(&base)?;
        let parsed = parse_profile(&text, &base)?;
        stack.push(base);
        let expanded = expand(parsed, fetch, stack)?;
        stack.pop();
        merged.overlay(&expanded);
    }
    merged.overlay(&profile);
    Ok(merged)
}
