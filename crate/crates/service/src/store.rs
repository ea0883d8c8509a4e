//! Append-only JSON-lines event logs, one file per session, plus a snapshot
//! of the live state every [`SNAPSHOT_EVERY`] events.
//!
//! The log is the source of truth. Snapshots are a cross-check: loading a
//! session replays the whole log and compares the result against the newest
//! snapshot that the log covers.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use charedit_core::ipm::MemoryBank;
use charedit_core::schema::ParameterVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::{Session, SessionEvent};

pub const SNAPSHOT_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("invalid session id `{0}`")]
    BadId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    /// Number of log events folded into this state.
    pub events: usize,
    pub version: u64,
    pub current: ParameterVector,
    pub bank: MemoryBank,
}

impl Snapshot {
    pub fn of(s: &Session) -> Self {
        Snapshot {
            session_id: s.id.clone(),
            events: s.events.len(),
            version: s.version,
            current: s.current.clone(),
            bank: s.bank.clone(),
        }
    }

    /// Field-by-field equality with floats compared by bits.
    pub fn matches(&self, other: &Snapshot) -> bool {
        self.session_id == other.session_id
            && self.events == other.events
            && self.version == other.version
            && self.current.bit_identical(&other.current)
            && self.bank.to_json() == other.bank.to_json()
    }
}

#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(SessionStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn checked(id: &str) -> Result<&str, StoreError> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if ok {
            Ok(id)
        } else {
            Err(StoreError::BadId(id.into()))
        }
    }

    pub fn log_path(&self, id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.dir.join(format!("{}.jsonl", Self::checked(id)?)))
    }

    pub fn snapshot_path(&self, id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.dir.join(format!("{}.snapshot.json", Self::checked(id)?)))
    }

    /// Appends the session's events from index `from` on. Returns the new
    /// persisted count.
    pub fn append(&self, session: &Session, from: usize) -> Result<usize, StoreError> {
        let path = self.log_path(&session.id)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut buf = String::new();
        for ev in &session.events[from..] {
            buf.push_str(&serde_json::to_string(ev).expect("events serialize"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).and_then(|_| f.flush()).map_err(io_err(&path))?;
        let total = session.events.len();
        if total / SNAPSHOT_EVERY > from / SNAPSHOT_EVERY {
            let snap = self.snapshot_path(&session.id)?;
            let body = serde_json::to_string(&Snapshot::of(session)).expect("snapshot serializes");
            fs::write(&snap, body).map_err(io_err(&snap))?;
        }
        Ok(total)
    }

    pub fn read_snapshot(&self, id: &str) -> Result<Option<Snapshot>, StoreError> {
        let path = self.snapshot_path(id)?;
        if !path.exists() {
            return Ok(None);
        }
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&body).map(Some).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })
    }

    /// Ids of every logged session, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(&self.dir)
            .map_err(io_err(&self.dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".jsonl")).map(String::from))
            .collect();
        ids.sort();
        Ok(ids)
    }
}

pub fn read_events(path: &Path) -> Result<Vec<SessionEvent>, StoreError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ev);
    }
    Ok(out)
}
