//! JSONL reading/writing and crash-safe file replacement.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: invalid record at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        offset: usize,
        message: String,
    },
}

/// Parses one JSON value per line. Blank lines are skipped; line numbers are
/// 1-based and `offset` is the byte offset of the failing position.
pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, content: &str) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    let mut line_start = 0usize;
    for (idx, raw) in content.split_inclusive('\n').enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        if !line.trim().is_empty() {
            match serde_json::from_str::<T>(line) {
                Ok(value) => out.push(value),
                Err(err) => {
                    return Err(JsonlError::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        offset: line_start + err.column().saturating_sub(1),
                        message: err.to_string(),
                    })
                }
            }
        }
        line_start += raw.len();
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let content = fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_jsonl(path, &content)
}

/// Serializes records one per line with a trailing LF.
pub fn to_jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, &record).expect("record serializes");
        buf.push(b'\n');
    }
    buf
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> io::Result<()> {
    write_atomic(path, &to_jsonl(records))
}

/// Replaces `path` with `bytes` via write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic_with(path, bytes, || Ok(()))
}

/// Like [`write_atomic`], running `before_rename` after the temp file is
/// durable. An error from the hook aborts the rename and leaves the target
/// untouched.
pub fn write_atomic_with(path: &Path, bytes: &[u8], before_rename: impl FnOnce() -> io::Result<()>) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut file = File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        before_rename()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Appends one line by rewriting the file atomically, so readers never see a
/// half-written record.
pub fn append_line_atomic(path: &Path, line: &str) -> io::Result<()> {
    append_line_atomic_with(path, line, || Ok(()))
}

pub fn append_line_atomic_with(
    path: &Path,
    line: &str,
    before_rename: impl FnOnce() -> io::Result<()>,
) -> io::Result<()> {
    let mut bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        bytes.push(b'\n');
    }
    bytes.extend_from_slice(line.trim_end_matches('\n').as_bytes());
    bytes.push(b'\n');
    write_atomic_with(path, &bytes, before_rename)
}
