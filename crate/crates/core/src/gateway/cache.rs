use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::ChatResponse;
use crate::io::write_atomic;

/// On-disk response cache: one JSON file per request hash.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Unreadable or corrupt entries are treated as misses.
    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        let bytes = fs::read(self.path_for(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put(&self, key: &str, response: &ChatResponse) -> io::Result<()> {
        let body = serde_json::to_vec_pretty(response).map_err(io::Error::other)?;
        write_atomic(&self.path_for(key), &body)
    }
}
