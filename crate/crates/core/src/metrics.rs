//! Convergence metrics, recomputation from a trace, and plot-ready exports.
//!
//! All three metrics are ratios of sums over per-query samples, so they are
//! invariant under sample order and under uniform replication. A zero
//! invocation total makes them undefined (`None`), never zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::{EventKind, TraceEvent};

pub const EXPORT_FORMAT_VERSION: &str = "1.0";

/// Per-query accounting. `successes <= u`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySample {
    pub query_id: String,
    /// Tools created (validation-passing syntheses).
    pub c: u64,
    /// Tool invocations issued.
    pub u: u64,
    pub successes: u64,
    /// Estimated tokens of tool output injected into the executor context.
    pub tool_tokens: u64,
}

impl QuerySample {
    pub fn new(query_id: impl Into<String>, c: u64, u: u64, successes: u64, tool_tokens: u64) -> Self {
        Self { query_id: query_id.into(), c, u, successes, tool_tokens }
    }
}

/// Associative sums over samples; what a checkpoint carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSums {
    pub queries: u64,
    pub c: u64,
    pub u: u64,
    pub successes: u64,
    pub tool_tokens: u64,
}

impl MetricSums {
    pub fn of(samples: &[QuerySample]) -> Self {
        let mut s = Self::default();
        for q in samples {
            s.add(q);
        }
        s
    }

    pub fn add(&mut self, q: &QuerySample) {
        self.queries += 1;
        self.c += q.c;
        self.u += q.u;
        self.successes += q.successes;
        self.tool_tokens += q.tool_tokens;
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.queries += other.queries;
        self.c += other.c;
        self.u += other.u;
        self.successes += other.successes;
        self.tool_tokens += other.tool_tokens;
    }

    pub fn egl(&self) -> Option<f64> {
        ratio(self.c, self.u).map(|r| r * 1000.0)
    }

    pub fn success_rate(&self) -> Option<f64> {
        ratio(self.successes, self.u)
    }

    pub fn avg_tokens(&self) -> Option<f64> {
        ratio(self.tool_tokens, self.u)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Evolutionary generality loss: `Σc / Σu × 1000`.
pub fn compute_egl(samples: &[QuerySample]) -> Option<f64> {
    MetricSums::of(samples).egl()
}

pub fn compute_success_rate(samples: &[QuerySample]) -> Option<f64> {
    MetricSums::of(samples).success_rate()
}

pub fn compute_avg_tokens_per_invocation(samples: &[QuerySample]) -> Option<f64> {
    MetricSums::of(samples).avg_tokens()
}

/// EGL after each query, cumulative or over the trailing `window` queries.
pub fn running_egl(samples: &[QuerySample], window: Option<usize>) -> Vec<Option<f64>> {
    (0..samples.len())
        .map(|i| {
            let start = match window {
                Some(w) if w > 0 => (i + 1).saturating_sub(w),
                _ => 0,
            };
            compute_egl(&samples[start..=i])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub batch: u64,
    pub queries: u64,
    pub success_rate: Option<f64>,
    pub avg_tokens: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryPoint {
    pub cumulative_queries: u64,
    pub library_size: u64,
}

/// Every number a run reports, in stream order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub samples: Vec<QuerySample>,
    pub library: Vec<LibraryPoint>,
    pub batches: Vec<BatchMetrics>,
}

impl RunMetrics {
    /// Records one committed batch.
    pub fn push_batch(&mut self, batch: u64, samples: Vec<QuerySample>, library_size: u64) {
        let sums = MetricSums::of(&samples);
        self.batches.push(BatchMetrics {
            batch,
            queries: samples.len() as u64,
            success_rate: sums.success_rate(),
            avg_tokens: sums.avg_tokens(),
        });
        self.samples.extend(samples);
        self.library.push(LibraryPoint { cumulative_queries: self.samples.len() as u64, library_size });
    }

    pub fn sums(&self) -> MetricSums {
        MetricSums::of(&self.samples)
    }

    pub fn egl(&self) -> Option<f64> {
        compute_egl(&self.samples)
    }

    pub fn success_rate(&self) -> Option<f64> {
        compute_success_rate(&self.samples)
    }

    pub fn avg_tokens(&self) -> Option<f64> {
        compute_avg_tokens_per_invocation(&self.samples)
    }

    pub fn final_library_size(&self) -> Option<u64> {
        self.library.last().map(|p| p.library_size)
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trace event {seq}: {reason}")]
    Malformed { seq: u64, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Default)]
struct PendingBatch {
    index: u64,
    query_ids: Vec<String>,
    samples: BTreeMap<String, QuerySample>,
    library_size: Option<u64>,
}

/// Recomputes metrics purely from trace events.
///
/// Only batches closed by an end boundary count; a batch left open by an
/// aborted run is discarded when the next batch starts.
pub fn replay(events: &[TraceEvent]) -> Result<RunMetrics, MetricsError> {
    let mut metrics = RunMetrics::default();
    let mut pending: Option<PendingBatch> = None;
    for e in events {
        let malformed = |reason: &str| MetricsError::Malformed { seq: e.seq, reason: reason.to_string() };
        match e.kind {
            EventKind::BatchBoundary => match e.str_field("edge") {
                Some("start") => {
                    let query_ids: Vec<String> = e
                        .payload
                        .get("query_ids")
                        .and_then(Value::as_array)
                        .ok_or_else(|| malformed("batch start without query_ids"))?
                        .iter()
                        .map(|v| v.as_str().map(str::to_string).ok_or_else(|| malformed("non-string query id")))
                        .collect::<Result<_, _>>()?;
                    let samples = query_ids.iter().map(|id| (id.clone(), QuerySample { query_id: id.clone(), ..Default::default() })).collect();
                    let index = e.u64_field("batch").ok_or_else(|| malformed("batch start without index"))?;
                    pending = Some(PendingBatch { index, query_ids, samples, library_size: None });
                }
                Some("end") => {
                    let batch = pending.take().ok_or_else(|| malformed("batch end without start"))?;
                    let size = batch.library_size.ok_or_else(|| malformed("batch closed without commit"))?;
                    let mut samples = batch.samples;
                    let ordered = batch
                        .query_ids
                        .iter()
                        .map(|id| samples.remove(id).ok_or_else(|| malformed("duplicate query id in batch")))
                        .collect::<Result<_, _>>()?;
                    metrics.push_batch(batch.index, ordered, size);
                }
                _ => return Err(malformed("unknown batch edge")),
            },
            EventKind::Invocation | EventKind::Validation => {
                let Some(batch) = pending.as_mut() else { continue };
                let Some(qid) = e.str_field("query_id") else { continue };
                let sample = batch.samples.get_mut(qid).ok_or_else(|| malformed("event for a query outside the batch"))?;
                if e.kind == EventKind::Invocation {
                    sample.u += 1;
                    if e.str_field("status") == Some("ok") {
                        sample.successes += 1;
                    }
                    sample.tool_tokens += e.u64_field("tool_tokens").ok_or_else(|| malformed("invocation without tool_tokens"))?;
                } else if e.str_field("stage") == Some("synthesis") && e.payload.get("passed") == Some(&Value::Bool(true)) {
                    sample.c += 1;
                }
            }
            EventKind::Commit => {
                if let Some(batch) = pending.as_mut() {
                    batch.library_size = Some(e.u64_field("library_size").ok_or_else(|| malformed("commit without library_size"))?);
                }
            }
            _ => {}
        }
    }
    Ok(metrics)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExportOptions {
    /// Trailing window for the EGL curve; cumulative when `None`.
    pub egl_window: Option<usize>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV bodies keyed by file name.
pub fn render_exports(metrics: &RunMetrics, options: ExportOptions) -> BTreeMap<&'static str, String> {
    let mut library = String::from("cumulative_queries,library_size\n");
    for p in &metrics.library {
        library.push_str(&format!("{},{}\n", p.cumulative_queries, p.library_size));
    }
    let mut egl = String::from("cumulative_queries,egl\n");
    for (i, v) in running_egl(&metrics.samples, options.egl_window).into_iter().enumerate() {
        egl.push_str(&format!("{},{}\n", i + 1, fmt_opt(v)));
    }
    let mut batches = String::from("batch,success_rate,avg_tokens_per_invocation\n");
    for b in &metrics.batches {
        batches.push_str(&format!("{},{},{}\n", b.batch, fmt_opt(b.success_rate), fmt_opt(b.avg_tokens)));
    }
    BTreeMap::from([("library_size.csv", library), ("egl.csv", egl), ("batches.csv", batches)])
}

/// Writes the CSV exports plus a versioned manifest of their digests.
pub fn export_curves(metrics: &RunMetrics, out_dir: &Path, options: ExportOptions) -> Result<Vec<PathBuf>, MetricsError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MetricsError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let mut digests = serde_json::Map::new();
    for (name, body) in render_exports(metrics, options) {
        let path = out_dir.join(name);
        fs::write(&path, &body).map_err(io_err(&path))?;
        digests.insert(name.to_string(), Value::String(hex::encode(Sha256::digest(body.as_bytes()))));
        written.push(path);
    }
    let manifest = json!({
        "format_version": EXPORT_FORMAT_VERSION,
        "egl_window": options.egl_window,
        "files": digests,
    });
    let path = out_dir.join("export_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}
