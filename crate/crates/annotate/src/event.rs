//! Event records and the append-only log file.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use g3dhf_core::model::{DistortionCategory, ItemId, Point};
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub session_id: String,
    pub subject_id: String,
    pub item_id: ItemId,
    /// Per-session sequence number, starting at 1.
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authenticity: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub marks: Vec<Point>,
    /// Snapshot size the marks were validated against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub categories: BTreeSet<DistortionCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl Submission {
    pub fn has_distortion_part(&self) -> bool {
        !self.marks.is_empty() || !self.categories.is_empty() || self.description.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session_id: String,
        subject_id: String,
        seed: u64,
        queue: Vec<ItemId>,
    },
    Navigated {
        session_id: String,
        cursor: usize,
        state: SessionState,
    },
    Submitted(Submission),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub lsn: u64,
    pub at: DateTime<Utc>,
    pub event: Event,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    /// `fsync` after every append, before the caller is acknowledged.
    #[default]
    Fsync,
    /// Hand each record to the OS but skip the sync.
    Buffered,
}

/// Parses the complete lines of a log. A trailing fragment without its
/// newline is a torn write and is ignored. Returns the records and the byte
/// length of the intact prefix.
pub fn parse_log(bytes: &[u8]) -> Result<(Vec<LogRecord>, usize)> {
    let intact = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    let mut records = Vec::new();
    for (idx, line) in bytes[..intact].split(|b| *b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let rec: LogRecord = serde_json::from_slice(line).map_err(|source| AnnotateError::BadRecord { line: idx + 1, source })?;
        records.push(rec);
    }
    Ok((records, intact))
}

pub struct EventLog {
    path: PathBuf,
    file: File,
    durability: Durability,
}

impl EventLog {
    /// Opens (creating if needed) the log and cuts off any torn tail so new
    /// records start on a fresh line.
    pub fn open(path: &Path, durability: Durability) -> Result<(EventLog, Vec<LogRecord>)> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(AnnotateError::io(path)(e)),
        };
        let (records, intact) = parse_log(&bytes)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(AnnotateError::io(path))?;
        if intact < bytes.len() {
            log::warn!("{}: dropping {} bytes of torn tail", path.display(), bytes.len() - intact);
            file.set_len(intact as u64).map_err(AnnotateError::io(path))?;
        }
        Ok((
            EventLog {
                path: path.to_owned(),
                file,
                durability,
            },
            records,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, rec: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec).expect("log record serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(AnnotateError::io(&self.path))?;
        if self.durability == Durability::Fsync {
            self.file.sync_data().map_err(AnnotateError::io(&self.path))?;
        }
        Ok(())
    }

    /// Replaces the log with only the records after `lsn`, via a temp file
    /// and rename.
    pub fn retain_after(&mut self, lsn: u64) -> Result<()> {
        let bytes = std::fs::read(&self.path).map_err(AnnotateError::io(&self.path))?;
        let (records, _) = parse_log(&bytes)?;
        let tmp = self.path.with_extension("compact.tmp");
        {
            let mut out = File::create(&tmp).map_err(AnnotateError::io(&tmp))?;
            for r in records.iter().filter(|r| r.lsn > lsn) {
                let mut line = serde_json::to_vec(r).expect("log record serializes");
                line.push(b'\n');
                out.write_all(&line).map_err(AnnotateError::io(&tmp))?;
            }
            out.sync_all().map_err(AnnotateError::io(&tmp))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(AnnotateError::io(&self.path))?;
        self.file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(AnnotateError::io(&self.path))?;
        Ok(())
    }
}
