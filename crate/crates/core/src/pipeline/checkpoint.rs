//! Durable progress: `checkpoint.json` plus an append-only per-item journal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Seek, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::io::write_atomic;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionProgress {
    /// Iterations `1..=completed_iterations` are reflected in the saved pool.
    pub completed_iterations: u32,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineCheckpoint {
    pub run_id: String,
    pub config_hash: String,
    #[serde(default)]
    pub expansion: ExpansionProgress,
    /// Phase name → ids of items whose outcome is journaled.
    #[serde(default)]
    pub completed: BTreeMap<String, BTreeSet<String>>,
}

impl PipelineCheckpoint {
    pub fn new(run_id: &str, config_hash: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            expansion: ExpansionProgress::default(),
            completed: BTreeMap::new(),
        }
    }

    pub fn path(output_dir: &Path) -> PathBuf {
        output_dir.join(CHECKPOINT_FILE)
    }

    pub fn load(output_dir: &Path) -> io::Result<Option<Self>> {
        let path = Self::path(output_dir);
        match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, output_dir: &Path) -> io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        bytes.push(b'\n');
        write_atomic(&Self::path(output_dir), &bytes)
    }

    pub fn phase(&self, name: &str) -> BTreeSet<String> {
        self.completed.get(name).cloned().unwrap_or_default()
    }
}

/// Append-only JSONL journal. Each entry is written with a single append
/// and synced, so a crash leaves at most one torn final line, which
/// [`Journal::open`] discards.
pub struct Journal {
    file: File,
}

impl Journal {
    /// Opens (creating if needed) and returns the intact entries.
    pub fn open<T: DeserializeOwned>(path: &Path) -> io::Result<(Self, Vec<T>)> {
        let content = match std::fs::read(path) {
            Ok(c) => c,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let intact_len = content.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let mut entries = Vec::new();
        for (n, line) in content[..intact_len].split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let entry = serde_json::from_slice(line).map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{} line {}: {e}", path.display(), n + 1),
                )
            })?;
            entries.push(entry);
        }
        let file = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
        file.set_len(intact_len as u64)?;
        let mut file = file;
        file.sync_all()?;
        file.seek(io::SeekFrom::End(0))?;
        Ok((Self { file }, entries))
    }

    /// Truncates any existing journal.
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self { file })
    }

    pub fn append<T: Serialize>(&mut self, entry: &T) -> io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert!(PipelineCheckpoint::load(dir.path()).unwrap().is_none());
        let mut c = PipelineCheckpoint::new("r", "h");
        c.completed.entry("synthesis".into()).or_default().insert("a".into());
        c.save(dir.path()).unwrap();
        assert_eq!(PipelineCheckpoint::load(dir.path()).unwrap(), Some(c));
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        std::fs::write(&path, "{\"n\":1}\n{\"n\":2}\n{\"n\":").unwrap();
        let (mut j, entries) = Journal::open::<serde_json::Value>(&path).unwrap();
        assert_eq!(entries.len(), 2);
        j.append(&serde_json::json!({"n": 3})).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "{\"n\":1}\n{\"n\":2}\n{\"n\":3}\n"
        );
    }
}
