//! `manifest.json`: every file a command wrote, with its SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Corpus text or a checkpoint.
    Artifact,
    /// Metrics, reports and resolved configs.
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    /// Path relative to the output directory.
    pub path: String,
    pub kind: EntryKind,
    pub command: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Records (or refreshes) `name` inside `dir`.
    pub fn record(&mut self, dir: &Path, name: &str, kind: EntryKind, command: &str) -> anyhow::Result<()> {
        let path = dir.join(name);
        let entry = Entry {
            path: name.to_string(),
            kind,
            command: command.to_string(),
            bytes: fs::metadata(&path)?.len(),
            sha256: sha256_file(&path)?,
        };
        self.entries.retain(|e| e.path != name);
        self.entries.push(entry);
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn artifacts(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Artifact)
    }
}
