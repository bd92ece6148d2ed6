//! Append-only JSON-lines persistence under a data directory.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const REGISTRY_FILE: &str = "registry.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const FA_RESULTS_FILE: &str = "fa_results.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file} line {line} is corrupt: {detail}")]
    Corrupt {
        file: String,
        line: usize,
        detail: String,
    },
}

/// A data directory, or nothing at all for ephemeral servers.
#[derive(Debug, Clone)]
pub struct Store {
    dir: Option<PathBuf>,
}

impl Store {
    pub fn ephemeral() -> Self {
        Store { dir: None }
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Store { dir: Some(dir) })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn append<T: Serialize>(&self, file: &str, record: &T) -> Result<(), StoreError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(file);
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        let io_err = |source| StoreError::Io {
            path: path.clone(),
            source,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        f.write_all(&line).map_err(io_err)?;
        f.flush().map_err(io_err)
    }

    /// Every record in `file`; a missing file is empty. Blank lines are skipped.
    pub fn load<T: DeserializeOwned>(&self, file: &str) -> Result<Vec<T>, StoreError> {
        let Some(dir) = &self.dir else {
            return Ok(Vec::new());
        };
        read_jsonl(&dir.join(file))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(StoreError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let file = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            file: file.clone(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
