//! Append-only, hash-chained audit log.
//!
//! Each record hashes `sequence|kind|recordedAt|prevHash|payload` with
//! SHA-256, where the payload is canonical JSON and the first record chains
//! to sixty-four zeros. A chain alone cannot reveal that its newest records
//! were cut off, so the log also keeps a head [`Anchor`] (record count and
//! last hash) next to the NDJSON file.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::worldstate::format_instant;

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    StateUpdate,
    Event,
    Prompt,
    BackendReply,
    Selection,
    Advisory,
    Briefing,
    ScopeReport,
    Conflict,
    OperatorAction,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::StateUpdate => "state_update",
            RecordKind::Event => "event",
            RecordKind::Prompt => "prompt",
            RecordKind::BackendReply => "backend_reply",
            RecordKind::Selection => "selection",
            RecordKind::Advisory => "advisory",
            RecordKind::Briefing => "briefing",
            RecordKind::ScopeReport => "scope_report",
            RecordKind::Conflict => "conflict",
            RecordKind::OperatorAction => "operator_action",
        }
    }

    /// Kinds delivered to stream subscribers.
    pub fn is_delivery(self) -> bool {
        matches!(self, RecordKind::Briefing | RecordKind::Advisory | RecordKind::Conflict)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRecord {
    pub sequence: u64,
    pub record_kind: RecordKind,
    pub recorded_at: DateTime<Utc>,
    pub payload: Json,
    pub prev_hash: String,
    pub hash: String,
}

impl AuditRecord {
    pub fn compute_hash(&self) -> String {
        record_hash(self.sequence, self.record_kind, self.recorded_at, &self.prev_hash, &self.payload)
    }
}

pub fn record_hash(sequence: u64, kind: RecordKind, recorded_at: DateTime<Utc>, prev_hash: &str, payload: &Json) -> String {
    let mut hasher = Sha256::new();
    hasher.update(sequence.to_string());
    hasher.update(b"|");
    hasher.update(kind.as_str());
    hasher.update(b"|");
    hasher.update(format_instant(recorded_at));
    hasher.update(b"|");
    hasher.update(prev_hash);
    hasher.update(b"|");
    hasher.update(payload.to_string());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Anchor {
    pub count: u64,
    pub last_hash: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuditError {
    #[error("record {sequence}: stored hash does not match its contents")]
    HashMismatch { sequence: u64 },
    #[error("record {sequence}: previous-hash link is broken")]
    BrokenChain { sequence: u64 },
    #[error("expected sequence {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("log holds {found} records but its head anchor records {expected}")]
    Truncated { expected: u64, found: u64 },
    #[error("last record hash differs from the head anchor")]
    AnchorMismatch,
    #[error("range {from}..{to} is outside 0..{len}")]
    RangeOutOfBounds { from: u64, to: u64, len: u64 },
    #[error("audit log {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// Verifies a complete log from genesis, and its head when given.
pub fn verify_records(records: &[AuditRecord], anchor: Option<&Anchor>) -> Result<(), AuditError> {
    verify_from(records, 0, GENESIS_HASH)?;
    if let Some(anchor) = anchor {
        if anchor.count != records.len() as u64 {
            return Err(AuditError::Truncated { expected: anchor.count, found: records.len() as u64 });
        }
        let last = records.last().map(|r| r.hash.as_str()).unwrap_or(GENESIS_HASH);
        if last != anchor.last_hash {
            return Err(AuditError::AnchorMismatch);
        }
    }
    Ok(())
}

/// Verifies a contiguous slice: every hash recomputes and every record
/// links to its predecessor inside the slice.
pub fn verify_segment(records: &[AuditRecord]) -> Result<(), AuditError> {
    match records.first() {
        None => Ok(()),
        Some(first) => verify_from(records, first.sequence, &first.prev_hash),
    }
}

fn verify_from(records: &[AuditRecord], first_sequence: u64, first_prev: &str) -> Result<(), AuditError> {
    let mut prev = first_prev;
    for (offset, record) in records.iter().enumerate() {
        let expected = first_sequence + offset as u64;
        if record.sequence != expected {
            return Err(AuditError::SequenceGap { expected, found: record.sequence });
        }
        if record.prev_hash != prev {
            return Err(AuditError::BrokenChain { sequence: record.sequence });
        }
        if record.compute_hash() != record.hash {
            return Err(AuditError::HashMismatch { sequence: record.sequence });
        }
        prev = &record.hash;
    }
    Ok(())
}

#[derive(Debug)]
struct FileSink {
    path: PathBuf,
    file: File,
}

#[derive(Debug, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    sink: Option<FileSink>,
}

impl AuditLog {
    pub fn in_memory() -> AuditLog {
        AuditLog::default()
    }

    /// Opens (or creates) an NDJSON log; existing records are verified
    /// against the head anchor before appending resumes.
    pub fn open(path: &Path) -> Result<AuditLog, AuditError> {
        let io = |e: std::io::Error| AuditError::Io { path: path.to_path_buf(), reason: e.to_string() };
        let records = if path.exists() { read_ndjson(path)? } else { Vec::new() };
        let anchor = read_anchor(path)?;
        if !records.is_empty() || anchor.is_some() {
            verify_records(&records, anchor.as_ref())?;
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(AuditLog { records, sink: Some(FileSink { path: path.to_path_buf(), file }) })
    }

    pub fn append(&mut self, kind: RecordKind, recorded_at: DateTime<Utc>, payload: Json) -> Result<&AuditRecord, AuditError> {
        let sequence = self.records.len() as u64;
        let prev_hash = self.records.last().map(|r| r.hash.clone()).unwrap_or_else(|| GENESIS_HASH.to_string());
        let hash = record_hash(sequence, kind, recorded_at, &prev_hash, &payload);
        let record = AuditRecord { sequence, record_kind: kind, recorded_at, payload, prev_hash, hash };
        if let Some(sink) = &mut self.sink {
            let io = |e: std::io::Error| AuditError::Io { path: sink.path.clone(), reason: e.to_string() };
            let line = serde_json::to_string(&record).expect("audit record serializes");
            writeln!(sink.file, "{line}").map_err(io)?;
            sink.file.flush().map_err(io)?;
            let anchor = Anchor { count: sequence + 1, last_hash: record.hash.clone() };
            let anchor_path = anchor_path(&sink.path);
            let tmp = anchor_path.with_extension("head.tmp");
            fs::write(&tmp, serde_json::to_vec(&anchor).expect("anchor serializes")).map_err(io)?;
            fs::rename(&tmp, &anchor_path).map_err(io)?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn anchor(&self) -> Anchor {
        Anchor {
            count: self.len(),
            last_hash: self.records.last().map(|r| r.hash.clone()).unwrap_or_else(|| GENESIS_HASH.to_string()),
        }
    }

    /// Records with `from <= sequence < to`.
    pub fn range(&self, from: u64, to: u64) -> Result<&[AuditRecord], AuditError> {
        if from > to || to > self.len() {
            return Err(AuditError::RangeOutOfBounds { from, to, len: self.len() });
        }
        Ok(&self.records[from as usize..to as usize])
    }

    /// Records after `sequence` (all records when `None`).
    pub fn since(&self, sequence: Option<u64>) -> &[AuditRecord] {
        let start = sequence.map_or(0, |s| (s + 1).min(self.len())) as usize;
        &self.records[start..]
    }

    pub fn verify(&self) -> Result<(), AuditError> {
        verify_records(&self.records, Some(&self.anchor()))
    }

    pub fn path(&self) -> Option<&Path> {
        self.sink.as_ref().map(|s| s.path.as_path())
    }
}

pub fn anchor_path(log_path: &Path) -> PathBuf {
    let mut name = log_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".head");
    log_path.with_file_name(name)
}

pub fn read_anchor(log_path: &Path) -> Result<Option<Anchor>, AuditError> {
    let path = anchor_path(log_path);
    if !path.exists() {
        return Ok(None);
    }
    let bad = |reason: String| AuditError::Io { path: path.clone(), reason };
    let text = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    serde_json::from_str(&text).map(Some).map_err(|e| bad(e.to_string()))
}

pub fn read_ndjson(path: &Path) -> Result<Vec<AuditRecord>, AuditError> {
    let bad = |reason: String| AuditError::Io { path: path.to_path_buf(), reason };
    let file = File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample(n: usize) -> AuditLog {
        let mut log = AuditLog::in_memory();
        let t0: DateTime<Utc> = "2023-06-14T18:00:00Z".parse().unwrap();
        for i in 0..n {
            log.append(RecordKind::Event, t0 + chrono::Duration::seconds(i as i64), json!({ "i": i }))
                .unwrap();
        }
        log
    }

    #[test]
    fn chain_starts_at_genesis_and_verifies() {
        let log = sample(5);
        assert_eq!(log.records()[0].sequence, 0);
        assert_eq!(log.records()[0].prev_hash, GENESIS_HASH);
        log.verify().unwrap();
    }

    #[test]
    fn mutation_is_detected() {
        let log = sample(4);
        let mut records = log.records().to_vec();
        records[2].payload = json!({ "i": 99 });
        assert_eq!(verify_records(&records, None), Err(AuditError::HashMismatch { sequence: 2 }));
    }

    #[test]
    fn interior_deletion_is_detected() {
        let log = sample(4);
        let mut records = log.records().to_vec();
        records.remove(1);
        assert!(verify_records(&records, None).is_err());
    }

    #[test]
    fn tail_deletion_needs_the_anchor() {
        let log = sample(4);
        let records = &log.records()[..3];
        assert!(verify_records(records, None).is_ok());
        assert_eq!(
            verify_records(records, Some(&log.anchor())),
            Err(AuditError::Truncated { expected: 4, found: 3 })
        );
    }

    #[test]
    fn range_bounds() {
        let log = sample(3);
        assert_eq!(log.range(0, 3).unwrap().len(), 3);
        verify_segment(log.range(1, 3).unwrap()).unwrap();
        assert_eq!(log.range(2, 5).unwrap_err(), AuditError::RangeOutOfBounds { from: 2, to: 5, len: 3 });
        assert_eq!(log.since(Some(0)).len(), 2);
        assert_eq!(log.since(None).len(), 3);
    }
}
