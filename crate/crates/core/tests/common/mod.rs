//! Generators and oracles shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use indexmap::IndexMap;
use proptest::prelude::*;
use slapforge_core::profile::{Profile, Section};

/// Profile whose values are literals or `${s:o}` references to options
/// declared earlier, so substitution always terminates.
pub fn acyclic_profile() -> impl Strategy<Value = Profile> {
    (1usize..6, 1usize..5)
        .prop_flat_map(|(sections, options)| {
            let n = sections * options;
            let cell = prop_oneof![
                3 => "[a-z0-9 ./-]{0,12}".prop_map(Value::Literal),
                2 => (any::<prop::sample::Index>(), "[a-z]{0,3}").prop_map(|(i, tail)| Value::Ref(i, tail)),
            ];
            (Just((sections, options)), prop::collection::vec(cell, n))
        })
        .prop_map(|((sections, options), cells)| {
            let mut profile = Profile::new("gen.cfg");
            let keys: Vec<(String, String)> =
                (0..sections).flat_map(|s| (0..options).map(move |o| (format!("s{s}"), format!("o{o}")))).collect();
            for (i, cell) in cells.into_iter().enumerate() {
                let (s, o) = &keys[i];
                let value = match cell {
                    Value::Ref(idx, tail) if i > 0 => {
                        let (rs, ro) = &keys[idx.index(i)];
                        format!("x${{{rs}:{ro}}}{tail}")
                    }
                    Value::Ref(_, tail) => tail,
                    Value::Literal(v) => v.trim().to_string(),
                };
                profile.set(s, o, value);
            }
            profile
        })
}

#[derive(Debug, Clone)]
pub enum Value {
    Literal(String),
    Ref(prop::sample::Index, String),
}

/// `${section:option}` tokens of a value.
pub fn refs(value: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut rest = value;
    while let Some(i) = rest.find("${") {
        let body = &rest[i + 2..];
        let end = body.find('}').expect("closed token");
        let (s, o) = body[..end].split_once(':').expect("section:option");
        out.push((s.to_string(), o.to_string()));
        rest = &body[end + 1..];
    }
    out
}

/// Naive recursive expansion used as an oracle for substitution.
pub fn expand_naive(profile: &Profile, value: &str, depth: usize) -> Option<String> {
    if depth > 64 {
        return None;
    }
    let mut out = String::new();
    let mut rest = value;
    while let Some(i) = rest.find("${") {
        out.push_str(&rest[..i]);
        let body = &rest[i + 2..];
        let end = body.find('}')?;
        let (s, o) = body[..end].split_once(':')?;
        let target = profile.get(s, o)?;
        out.push_str(&expand_naive(profile, target, depth + 1)?);
        rest = &body[end + 1..];
    }
    out.push_str(rest);
    Some(out)
}

/// Acyclic profile plus a chain of `len` options, all distinct, rewritten
/// so that each references the next and the last references the first.
pub fn profile_with_cycle() -> impl Strategy<Value = (Profile, Vec<(String, String)>)> {
    (acyclic_profile(), 1usize..5, any::<u64>()).prop_map(|(mut profile, len, salt)| {
        let cells: Vec<(String, String)> = profile
            .sections
            .iter()
            .flat_map(|(s, opts)| opts.keys().map(move |o| (s.clone(), o.clone())))
            .collect();
        let len = len.min(cells.len());
        let start = (salt as usize) % cells.len();
        let chain: Vec<(String, String)> = (0..len).map(|k| cells[(start + k * 7) % cells.len()].clone()).collect();
        let chain: Vec<(String, String)> = chain.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        for (k, (s, o)) in chain.iter().enumerate() {
            let (ns, no) = &chain[(k + 1) % chain.len()];
            profile.set(s, o, format!("pre ${{{ns}:{no}}} post"));
        }
        (profile, chain)
    })
}

/// Arbitrary well-formed profile for round-trip checks: values may span
/// several lines and may be empty.
pub fn any_profile() -> impl Strategy<Value = Profile> {
    let name = "[a-z][a-z0-9_.:-]{0,10}";
    let key = prop_oneof![10 => "[a-z][a-z0-9_.-]{0,10}".prop_map(String::from), 1 => Just("<".to_string())];
    let line = "[a-zA-Z0-9${}:/._-][a-zA-Z0-9 ${}:/.=_-]{0,15}[a-zA-Z0-9}]";
    let value = (prop_oneof![Just(String::new()), line.prop_map(String::from)], prop::collection::vec(line, 0..3))
        .prop_map(|(first, more)| {
            let mut v = first;
            for l in more {
                v.push('\n');
                v.push_str(&l);
            }
            v
        });
    let section = prop::collection::vec((key, value), 0..5);
    prop::collection::vec((name, section), 0..6).prop_map(|sections| {
        let mut profile = Profile::new("roundtrip.cfg");
        let mut map: IndexMap<String, Section> = IndexMap::new();
        for (name, options) in sections {
            let section = map.entry(name).or_default();
            for (k, v) in options {
                section.entry(k).or_insert(v);
            }
        }
        profile.sections = map;
        profile
    })
}

/// `extends` graph over `n` files: for each file, the indices it extends.
pub fn extends_graph() -> impl Strategy<Value = Vec<Vec<usize>>> {
    (1usize..7).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0..n, 0..3), n))
}

pub fn file_name(i: usize) -> String {
    format!("/repo/f{i}.cfg")
}

/// Profile texts for an extends graph.
pub fn extends_files(graph: &[Vec<usize>]) -> BTreeMap<String, String> {
    graph
        .iter()
        .enumerate()
        .map(|(i, bases)| {
            let list: Vec<String> = bases.iter().map(|b| format!("f{b}.cfg")).collect();
            let text = if list.is_empty() {
                format!("[f{i}]\nid = {i}\n")
            } else {
                format!("[buildout]\nextends = {}\n[f{i}]\nid = {i}\n", list.join(" "))
            };
            (file_name(i), text)
        })
        .collect()
}

/// Oracle: is there a cycle among the files reachable from file 0?
/// Reachability by BFS, then Kahn's algorithm on the reachable subgraph.
pub fn reachable_cycle(graph: &[Vec<usize>]) -> bool {
    let mut seen = BTreeSet::from([0usize]);
    let mut queue = VecDeque::from([0usize]);
    while let Some(v) = queue.pop_front() {
        for &w in &graph[v] {
            if seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    let mut indegree: BTreeMap<usize, usize> = seen.iter().map(|&v| (v, 0)).collect();
    for &v in &seen {
        for &w in &graph[v] {
            *indegree.get_mut(&w).unwrap() += 1;
        }
    }
    let mut ready: Vec<usize> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&v, _)| v).collect();
    let mut removed = 0;
    while let Some(v) = ready.pop() {
        removed += 1;
        for &w in &graph[v] {
            let d = indegree.get_mut(&w).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(w);
            }
        }
    }
    removed < seen.len()
}
