//! Append-only event trace.
//!
//! One JSON object per line: `{"seq","ts","kind","payload","prev","digest"}`.
//! `digest` is SHA-256 over `prev` followed by the canonical JSON of
//! `{"kind","payload","seq","ts"}`; `prev` is the previous line's digest, or
//! [`GENESIS`] for the first line. Sequence numbers start at 1 and are
//! assigned by the single appender, so a gap, an edited line or a truncated
//! tail is detected at the offending sequence number.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TRACE_FORMAT_VERSION: &str = "1.0";
pub const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Run header: format version and the effective configuration.
    Header,
    Phase,
    LlmExchange,
    Invocation,
    Validation,
    BatchBoundary,
    Absorb,
    Commit,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Header => "header",
            EventKind::Phase => "phase",
            EventKind::LlmExchange => "llm_exchange",
            EventKind::Invocation => "invocation",
            EventKind::Validation => "validation",
            EventKind::BatchBoundary => "batch_boundary",
            EventKind::Absorb => "absorb",
            EventKind::Commit => "commit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub ts: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub prev: String,
    pub digest: String,
}

impl TraceEvent {
    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    pub fn u64_field(&self, key: &str) -> Option<u64> {
        self.payload.get(key).and_then(Value::as_u64)
    }
}

/// An event not yet sequenced; workers buffer these and the appender
/// assigns order.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDraft {
    pub kind: EventKind,
    pub payload: Value,
}

impl EventDraft {
    pub fn new(kind: EventKind, payload: Value) -> Self {
        Self { kind, payload }
    }
}

pub fn event_digest(prev: &str, seq: u64, ts: u64, kind: EventKind, payload: &Value) -> String {
    let body = json!({"kind": kind, "payload": payload, "seq": seq, "ts": ts});
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(body.to_string().as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("trace corrupt at seq {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
}

/// Source of event timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

/// Monotone tick counter; makes traces of scripted runs byte-reproducible.
#[derive(Debug, Default)]
pub struct LogicalClock(AtomicU64);

impl LogicalClock {
    pub fn starting_at(tick: u64) -> Self {
        Self(AtomicU64::new(tick))
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst) + 1
    }
}

/// Milliseconds since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

struct Inner {
    out: Option<BufWriter<File>>,
    path: Option<PathBuf>,
    next_seq: u64,
    prev: String,
    events: Vec<TraceEvent>,
}

/// The single serialized appender. Every appended event is also retained
/// in memory for live metric computation.
pub struct TraceWriter {
    inner: Mutex<Inner>,
    clock: Box<dyn Clock>,
}

impl std::fmt::Debug for TraceWriter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.lock().expect("trace lock poisoned");
        f.debug_struct("TraceWriter").field("path", &inner.path).field("next_seq", &inner.next_seq).finish()
    }
}

impl TraceWriter {
    pub fn in_memory(clock: Box<dyn Clock>) -> Self {
        Self { inner: Mutex::new(Inner { out: None, path: None, next_seq: 1, prev: GENESIS.into(), events: Vec::new() }), clock }
    }

    /// Creates (truncating) a trace file.
    pub fn create(path: &Path, clock: Box<dyn Clock>) -> Result<Self, TraceError> {
        let io_err = |source| TraceError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = File::create(path).map_err(io_err)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                out: Some(BufWriter::new(file)),
                path: Some(path.to_path_buf()),
                next_seq: 1,
                prev: GENESIS.into(),
                events: Vec::new(),
            }),
            clock,
        })
    }

    /// Verifies an existing trace and continues its chain. A missing file
    /// starts a new trace.
    pub fn resume(path: &Path, clock: Box<dyn Clock>) -> Result<Self, TraceError> {
        if !path.exists() {
            return Self::create(path, clock);
        }
        let events = read_trace(path)?;
        let file = OpenOptions::new().append(true).open(path).map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
        let (next_seq, prev) = events.last().map(|e| (e.seq + 1, e.digest.clone())).unwrap_or((1, GENESIS.into()));
        Ok(Self {
            inner: Mutex::new(Inner { out: Some(BufWriter::new(file)), path: Some(path.to_path_buf()), next_seq, prev, events }),
            clock,
        })
    }

    pub fn append(&self, kind: EventKind, payload: Value) -> Result<u64, TraceError> {
        self.append_all(vec![EventDraft::new(kind, payload)]).map(|seqs| seqs[0])
    }

    /// Appends drafts contiguously, in order, and flushes once.
    pub fn append_all(&self, drafts: Vec<EventDraft>) -> Result<Vec<u64>, TraceError> {
        let mut inner = self.inner.lock().expect("trace lock poisoned");
        let mut seqs = Vec::with_capacity(drafts.len());
        for draft in drafts {
            let seq = inner.next_seq;
            let ts = self.clock.now();
            let digest = event_digest(&inner.prev, seq, ts, draft.kind, &draft.payload);
            let event = TraceEvent { seq, ts, kind: draft.kind, payload: draft.payload, prev: inner.prev.clone(), digest: digest.clone() };
            if let Some(out) = inner.out.as_mut() {
                let line = serde_json::to_string(&event).expect("event serializes");
                let res = out.write_all(line.as_bytes()).and_then(|_| out.write_all(b"\n"));
                if let Err(source) = res {
                    return Err(TraceError::Io { path: inner.path.clone().unwrap_or_default(), source });
                }
            }
            inner.prev = digest;
            inner.next_seq += 1;
            inner.events.push(event);
            seqs.push(seq);
        }
        let Inner { out, path, .. } = &mut *inner;
        if let Some(out) = out.as_mut() {
            out.flush().map_err(|source| TraceError::Io { path: path.clone().unwrap_or_default(), source })?;
        }
        Ok(seqs)
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.inner.lock().expect("trace lock poisoned").events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("trace lock poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<PathBuf> {
        self.inner.lock().expect("trace lock poisoned").path.clone()
    }
}

/// Reads and verifies a trace file.
pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
    parse_trace(&text)
}

/// Parses and verifies trace text: sequence continuity, chain links and
/// per-line digests.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut prev = GENESIS.to_string();
    for (expected_seq, line) in (1u64..).zip(text.split_inclusive('\n')) {
        if !line.ends_with('\n') {
            return Err(TraceError::Corrupt { seq: expected_seq, reason: "truncated final line".into() });
        }
        let line = line.trim_end_matches('\n');
        let event: TraceEvent = serde_json::from_str(line)
            .map_err(|e| TraceError::Corrupt { seq: expected_seq, reason: format!("unparseable line: {e}") })?;
        if event.seq != expected_seq {
            return Err(TraceError::Corrupt { seq: expected_seq, reason: format!("sequence gap: found {}", event.seq) });
        }
        if event.prev != prev {
            return Err(TraceError::Corrupt { seq: event.seq, reason: "broken chain link".into() });
        }
        let actual = event_digest(&event.prev, event.seq, event.ts, event.kind, &event.payload);
        if actual != event.digest {
            return Err(TraceError::Corrupt { seq: event.seq, reason: "digest mismatch".into() });
        }
        prev = event.digest.clone();
        events.push(event);
    }
    Ok(events)
}
