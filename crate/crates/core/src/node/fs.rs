use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mac::{label_path, ObjectContext};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub owner: String,
    pub content: String,
}

/// In-memory filesystem of one node: absolute path to file.
/// Directories are implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimFs {
    files: BTreeMap<String, FileEntry>,
}

impl SimFs {
    pub fn new() -> Self {
        SimFs::default()
    }

    /// Writes `content`; returns false when the file already held exactly this.
    pub fn write(&mut self, path: &str, owner: &str, content: &str) -> bool {
        match self.files.get_mut(path) {
            Some(entry) if entry.content == content && entry.owner == owner => false,
            Some(entry) => {
                entry.content = content.to_string();
                entry.owner = owner.to_string();
                true
            }
            None => {
                self.files.insert(path.to_string(), FileEntry { owner: owner.to_string(), content: content.to_string() });
                true
            }
        }
    }

    pub fn append(&mut self, path: &str, owner: &str, text: &str) {
        let entry = self
            .files
            .entry(path.to_string())
            .or_insert_with(|| FileEntry { owner: owner.to_string(), content: String::new() });
        entry.content.push_str(text);
    }

    pub fn read(&self, path: &str) -> Option<&str> {
        self.files.get(path).map(|e| e.content.as_str())
    }

    pub fn entry(&self, path: &str) -> Option<&FileEntry> {
        self.files.get(path)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.files.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FileEntry)> {
        self.files.iter().map(|(p, e)| (p.as_str(), e))
    }

    /// Files at or below `dir`.
    pub fn under<'a>(&'a self, dir: &'a str) -> impl Iterator<Item = (&'a str, &'a FileEntry)> + 'a {
        let prefix = format!("{}/", dir.trim_end_matches('/'));
        self.files
            .range(prefix.clone()..)
            .take_while(move |(p, _)| p.starts_with(&prefix))
            .map(|(p, e)| (p.as_str(), e))
    }

    /// Removes every file below `dir`, returning how many went.
    pub fn remove_under(&mut self, dir: &str) -> usize {
        let doomed: Vec<String> = self.under(dir).map(|(p, _)| p.to_string()).collect();
        for p in &doomed {
            self.files.remove(p);
        }
        doomed.len()
    }

    pub fn context(&self, path: &str) -> ObjectContext {
        let mut ctx = label_path(path);
        if let Some(e) = self.files.get(path) {
            ctx.owner = e.owner.clone();
        }
        ctx
    }

    /// Writes the tree below `dir`, plus an `OWNERS` index since file
    /// ownership cannot be reproduced without privileges.
    pub fn export(&self, dir: &Path) -> io::Result<()> {
        let mut owners = String::new();
        for (path, entry) in &self.files {
            let target = dir.join(path.trim_start_matches('/'));
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&target, &entry.content)?;
            owners.push_str(&format!("{}\t{}\n", entry.owner, path));
        }
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("OWNERS"), owners)
    }
}
