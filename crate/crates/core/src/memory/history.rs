//! Append-only episode history as JSON lines.
//!
//! Every append is written with a single `write` call and flushed before it
//! returns, so a record survives the process being killed afterwards;
//! `fsync` additionally protects against power loss. On open, a trailing
//! partial line (from a crash mid-write) is discarded.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MemoryError, Result};
use crate::planner::TraceEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Qa,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub ts: DateTime<Utc>,
    pub session: String,
    pub kind: EpisodeKind,
    pub trace: Vec<TraceEntry>,
    /// SHA-256 of the episode inputs, hex.
    pub inputs_digest: String,
    pub output: String,
    pub trace_id: String,
}

impl HistoryRecord {
    pub fn new(
        session: impl Into<String>,
        kind: EpisodeKind,
        trace: Vec<TraceEntry>,
        inputs: &[&str],
        output: impl Into<String>,
        trace_id: impl Into<String>,
    ) -> Self {
        Self {
            ts: Utc::now(),
            session: session.into(),
            kind,
            trace,
            inputs_digest: digest_inputs(inputs),
            output: output.into(),
            trace_id: trace_id.into(),
        }
    }
}

/// SHA-256 over the inputs, each prefixed by its byte length.
pub fn digest_inputs(inputs: &[&str]) -> String {
    let mut h = Sha256::new();
    for s in inputs {
        h.update((s.len() as u64).to_le_bytes());
        h.update(s.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryFilter {
    pub session: Option<String>,
    pub kind: Option<EpisodeKind>,
    pub trace_id: Option<String>,
    pub limit: Option<usize>,
}

impl HistoryFilter {
    fn matches(&self, r: &HistoryRecord) -> bool {
        self.session.as_ref().is_none_or(|s| *s == r.session)
            && self.kind.is_none_or(|k| k == r.kind)
            && self.trace_id.as_ref().is_none_or(|t| *t == r.trace_id)
    }
}

#[derive(Debug)]
struct Inner {
    file: Option<File>,
    records: Vec<HistoryRecord>,
    last_ts: HashMap<String, DateTime<Utc>>,
}

#[derive(Debug)]
pub struct HistoryLog {
    path: Option<PathBuf>,
    fsync: bool,
    inner: Mutex<Inner>,
}

impl HistoryLog {
    /// A log that is not persisted.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            fsync: false,
            inner: Mutex::new(Inner { file: None, records: Vec::new(), last_ts: HashMap::new() }),
        }
    }

    /// Opens or creates the log at `path`, loading existing records.
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut records = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(&path)?);
            let mut line = String::new();
            let mut line_no = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                if !line.ends_with('\n') {
                    tracing::warn!(line = line_no, "discarding partial trailing history line");
                    break;
                }
                let rec: HistoryRecord = serde_json::from_str(line.trim_end())
                    .map_err(|e| MemoryError::CorruptLog { line: line_no, reason: e.to_string() })?;
                records.push(rec);
                good_len += n as u64;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        let mut last_ts = HashMap::new();
        for r in &records {
            last_ts.insert(r.session.clone(), r.ts);
        }
        Ok(Self { path: Some(path), fsync, inner: Mutex::new(Inner { file: Some(file), records, last_ts }) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends `rec`, moving its timestamp forward if needed so timestamps
    /// strictly increase within a session. Returns the stored record.
    pub fn append(&self, mut rec: HistoryRecord) -> Result<HistoryRecord> {
        let mut inner = self.lock();
        if let Some(last) = inner.last_ts.get(&rec.session) {
            if rec.ts <= *last {
                rec.ts = *last + Duration::microseconds(1);
            }
        }
        let mut line = serde_json::to_string(&rec).map_err(|e| MemoryError::InvalidRecord(e.to_string()))?;
        line.push('\n');
        if let Some(file) = inner.file.as_mut() {
            file.write_all(line.as_bytes())?;
            file.flush()?;
            if self.fsync {
                file.sync_data()?;
            }
        }
        inner.last_ts.insert(rec.session.clone(), rec.ts);
        inner.records.push(rec.clone());
        Ok(rec)
    }

    /// Matching records in append order (the first `limit` if set).
    pub fn query(&self, filter: &HistoryFilter) -> Vec<HistoryRecord> {
        let inner = self.lock();
        let it = inner.records.iter().filter(|r| filter.matches(r)).cloned();
        match filter.limit {
            Some(n) => it.take(n).collect(),
            None => it.collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
