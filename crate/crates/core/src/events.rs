//! Append-only audit log.
//!
//! Every mutation of the catalogue, every tool invocation made through the
//! gateway and every workflow step lands here as an [`EventRecord`]. Metrics,
//! traces and replay assertions are all derived from this log, so records are
//! never rewritten once appended. When the log is file-backed each record is
//! written as one JSON line before `append` returns.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Source of timestamps for documents and events.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Wall-clock time.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock for replays: starts at a fixed origin and advances one
/// second per reading.
#[derive(Debug)]
pub struct LogicalClock {
    origin: DateTime<Utc>,
    ticks: AtomicI64,
}

impl LogicalClock {
    pub fn new(origin: DateTime<Utc>) -> Self {
        Self {
            origin,
            ticks: AtomicI64::new(0),
        }
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new(Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap())
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> DateTime<Utc> {
        let tick = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.origin + chrono::Duration::seconds(tick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DocumentCreated,
    DocumentPromoted,
    MetadataEnriched,
    AssessmentRecorded,
    ToolInvoked,
    CapabilityDenied,
    GrantTableLoaded,
    ProjectStarted,
    Observation,
    AgentAction,
    TokenUsage,
    FeedbackTruncated,
    ClarificationRequested,
    ClarificationAnswered,
    ProjectPaused,
    ProjectResumed,
    Triage,
    Curation,
    DraftSubmitted,
    Verdict,
    Score,
    Feedback,
    IterationOutcome,
    ProtocolViolation,
    MissingDraft,
    Compression,
    CompressionFailed,
    BudgetWarning,
    AbortRequested,
    ProjectFinished,
}

impl EventKind {
    /// Events that read or write catalogue state.
    pub fn touches_catalogue(self) -> bool {
        matches!(
            self,
            EventKind::DocumentCreated
                | EventKind::DocumentPromoted
                | EventKind::MetadataEnriched
                | EventKind::AssessmentRecorded
                | EventKind::ToolInvoked
        )
    }
}

/// One line of the event log: `{seq, timestamp, kind, actor, doc_id, detail}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub actor: String,
    pub doc_id: Option<String>,
    pub detail: Value,
}

impl EventRecord {
    /// Project the event belongs to, if any (`detail.project`).
    pub fn project(&self) -> Option<&str> {
        self.detail.get("project").and_then(Value::as_str)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialise")
    }
}

struct Inner {
    records: Vec<EventRecord>,
    sink: Option<File>,
}

pub struct EventLog {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl EventLog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                records: Vec::new(),
                sink: None,
            }),
            path: None,
            clock,
        }
    }

    /// Opens (or creates) a JSON-lines log, loading any existing records.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: EventRecord = serde_json::from_str(&line).map_err(|e| {
                    io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("{}:{}: {e}", path.display(), lineno + 1),
                    )
                })?;
                if let Some(prev) = records.last() {
                    let prev: &EventRecord = prev;
                    if record.seq <= prev.seq {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{}: seq {} not increasing", path.display(), record.seq),
                        ));
                    }
                }
                records.push(record);
            }
        }
        let sink = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                records,
                sink: Some(sink),
            }),
            path: Some(path),
            clock,
        })
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(
        &self,
        kind: EventKind,
        actor: impl Into<String>,
        doc_id: Option<String>,
        detail: Value,
    ) -> io::Result<EventRecord> {
        let mut inner = self.inner.lock().expect("event log poisoned");
        let seq = inner.records.last().map_or(1, |r| r.seq + 1);
        let record = EventRecord {
            seq,
            timestamp: self.clock.now(),
            kind,
            actor: actor.into(),
            doc_id,
            detail,
        };
        if let Some(sink) = inner.sink.as_mut() {
            let mut line = record.to_json_line();
            line.push('\n');
            sink.write_all(line.as_bytes())?;
            sink.flush()?;
        }
        inner.records.push(record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("event log poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.inner.lock().expect("event log poisoned").records.clone()
    }

    /// Records with `seq > after`.
    pub fn since(&self, after: u64) -> Vec<EventRecord> {
        let inner = self.inner.lock().expect("event log poisoned");
        let start = inner.records.partition_point(|r| r.seq <= after);
        inner.records[start..].to_vec()
    }

    pub fn for_project(&self, project: &str) -> Vec<EventRecord> {
        self.inner
            .lock()
            .expect("event log poisoned")
            .records
            .iter()
            .filter(|r| r.project() == Some(project))
            .cloned()
            .collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.inner
            .lock()
            .expect("event log poisoned")
            .records
            .last()
            .map_or(0, |r| r.seq)
    }

    pub fn to_jsonl(&self) -> String {
        render_jsonl(&self.records())
    }
}

pub fn render_jsonl(records: &[EventRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines event log.
pub fn parse_jsonl(text: &str) -> Result<Vec<EventRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn seq_is_strictly_increasing() {
        let log = EventLog::in_memory(Arc::new(LogicalClock::default()));
        for _ in 0..5 {
            log.append(EventKind::Triage, "engine", None, json!({})).unwrap();
        }
        let seqs: Vec<u64> = log.records().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
        assert_eq!(log.since(3).len(), 2);
    }

    #[test]
    fn file_log_reopens_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let clock: Arc<dyn Clock> = Arc::new(LogicalClock::default());
        {
            let log = EventLog::open(&path, clock.clone()).unwrap();
            log.append(EventKind::ProjectStarted, "user", None, json!({"project": "a-b-c-d"}))
                .unwrap();
            log.append(EventKind::Verdict, "corroborator", Some("ff".into()), json!({"x": 1}))
                .unwrap();
        }
        let before = std::fs::read_to_string(&path).unwrap();
        let log = EventLog::open(&path, clock).unwrap();
        assert_eq!(log.to_jsonl(), before);
        assert_eq!(log.for_project("a-b-c-d").len(), 1);
        let next = log.append(EventKind::Score, "critic", None, json!({})).unwrap();
        assert_eq!(next.seq, 3);
    }

    #[test]
    fn logical_clock_advances() {
        let clock = LogicalClock::default();
        let a = clock.now();
        let b = clock.now();
        assert_eq!((b - a).num_seconds(), 1);
    }
}
