//! Batch scheduling over a frozen snapshot and the stream fold.
//!
//! Each batch reads one immutable snapshot; jobs run concurrently and never
//! write the registry. At the barrier the jobs' events are appended in query
//! order, the candidates are absorbed, and the next snapshot is committed.
//! The trace order of one batch is always:
//! `batch_boundary(start)`, job events, `absorb`, `commit`,
//! `batch_boundary(end)`.

mod absorb;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use absorb::{
    absorb, rename_source, singleton_plan, validate_partition, AbsorbOptions, AbsorbResult, ClusterOutcome, PlanSource,
};

use crate::gateway::Gateway;
use crate::metrics::{MetricSums, QuerySample, RunMetrics};
use crate::prompts::{FinalAnswer, PromptSuite};
use crate::registry::{RegistryError, RegistrySnapshot, ToolStats};
use crate::sandbox::Sandbox;
use crate::trace::{EventDraft, EventKind, TraceError, TraceWriter, TRACE_FORMAT_VERSION};
use crate::workflow::{run_query, Budgets, JobOutcome, WorkflowContext};

pub use crate::workflow::QueryInput;

/// Random per-job start delays, for exercising snapshot isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Jitter {
    pub seed: u64,
    pub max_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub batch_size: usize,
    pub max_workers: usize,
    pub budgets: Budgets,
    pub reconsolidate_globals: bool,
    pub aggregator_retries: u32,
    #[serde(skip)]
    pub jitter: Option<Jitter>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_workers: 16,
            budgets: Budgets::default(),
            reconsolidate_globals: false,
            aggregator_retries: 1,
            jitter: None,
        }
    }
}

/// The evolving system state: fixed workflow configuration and prompt
/// suite, plus the current registry snapshot.
#[derive(Debug, Clone)]
pub struct EvolutionState {
    pub step: u64,
    pub budgets: Budgets,
    pub prompt_digest: String,
    pub snapshot: Arc<RegistrySnapshot>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("commit failed: {0}")]
    Commit(#[from] RegistryError),
    #[error("batch size must be at least 1")]
    EmptyBatch,
}

/// One answered query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    pub final_answer: String,
    pub reasoning_summary: String,
    pub completed: bool,
}

impl AnswerRecord {
    fn new(query_id: &str, answer: &FinalAnswer, completed: bool) -> Self {
        Self {
            query_id: query_id.to_string(),
            final_answer: answer.final_answer.clone(),
            reasoning_summary: answer.reasoning_summary.clone(),
            completed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub batch: u64,
    /// In input order.
    pub answers: Vec<AnswerRecord>,
    pub samples: Vec<QuerySample>,
    /// Listing digest each job observed, in input order.
    pub observed_listings: Vec<String>,
    pub absorb: AbsorbResult,
    pub snapshot: Arc<RegistrySnapshot>,
}

/// Resumable position in a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Queries consumed, i.e. the index of the next query to run.
    pub offset: usize,
    pub next_batch: u64,
    pub step: u64,
    pub snapshot_path: PathBuf,
    pub sums: MetricSums,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n")?;
        fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Receives each committed batch; an error stops the stream.
pub trait StreamSink {
    fn on_batch(&mut self, outcome: &BatchOutcome, next_offset: usize) -> Result<(), String>;
}

impl<F: FnMut(&BatchOutcome, usize) -> Result<(), String>> StreamSink for F {
    fn on_batch(&mut self, outcome: &BatchOutcome, next_offset: usize) -> Result<(), String> {
        self(outcome, next_offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamStatus {
    Completed,
    /// Stopped by request before the batch at `offset`.
    Interrupted { offset: usize },
    /// The sink failed after committing the batch ending at `offset`.
    SinkFailed { offset: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub status: StreamStatus,
    /// Offset of the next unprocessed query.
    pub offset: usize,
    pub answers: Vec<AnswerRecord>,
}

pub struct Engine {
    gateway: Arc<Gateway>,
    sandbox: Arc<Sandbox>,
    prompts: Arc<PromptSuite>,
    config: EngineConfig,
    trace: Arc<TraceWriter>,
    head: RwLock<Arc<RegistrySnapshot>>,
    next_batch: Mutex<u64>,
    metrics: Mutex<RunMetrics>,
    prior_sums: MetricSums,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).field("step", &self.snapshot().step()).finish()
    }
}

impl Engine {
    pub fn new(
        gateway: Arc<Gateway>,
        sandbox: Arc<Sandbox>,
        prompts: Arc<PromptSuite>,
        config: EngineConfig,
        trace: Arc<TraceWriter>,
        initial: RegistrySnapshot,
    ) -> Self {
        Self {
            gateway,
            sandbox,
            prompts,
            config,
            trace,
            head: RwLock::new(Arc::new(initial)),
            next_batch: Mutex::new(0),
            metrics: Mutex::new(RunMetrics::default()),
            prior_sums: MetricSums::default(),
        }
    }

    /// Continues numbering and metric sums from a checkpoint.
    pub fn resume_from(mut self, checkpoint: &Checkpoint) -> Self {
        *self.next_batch.get_mut().expect("batch counter poisoned") = checkpoint.next_batch;
        self.prior_sums = checkpoint.sums;
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn trace(&self) -> &TraceWriter {
        &self.trace
    }

    pub fn snapshot(&self) -> Arc<RegistrySnapshot> {
        self.head.read().expect("head lock poisoned").clone()
    }

    pub fn state(&self) -> EvolutionState {
        let snapshot = self.snapshot();
        EvolutionState { step: snapshot.step(), budgets: self.config.budgets, prompt_digest: self.prompts.digest().to_string(), snapshot }
    }

    /// Metrics of the batches run by this engine instance.
    pub fn metrics(&self) -> RunMetrics {
        self.metrics.lock().expect("metrics lock poisoned").clone()
    }

    /// Sums including those carried over from a checkpoint.
    pub fn cumulative_sums(&self) -> MetricSums {
        let mut sums = self.prior_sums;
        sums.merge(&self.metrics().sums());
        sums
    }

    /// Appends the run header with the effective configuration.
    pub fn write_header(&self, config_echo: Value) -> Result<(), EngineError> {
        let snapshot = self.snapshot();
        self.trace.append(
            EventKind::Header,
            json!({
                "format_version": TRACE_FORMAT_VERSION,
                "config": config_echo,
                "prompt_suite_digest": self.prompts.digest(),
                "provider": self.gateway.provider_id(),
                "initial": {
                    "step": snapshot.step(),
                    "library_size": snapshot.len(),
                    "listing_digest": snapshot.listing_digest(),
                },
            }),
        )?;
        Ok(())
    }

    fn run_jobs(&self, snapshot: &RegistrySnapshot, queries: &[QueryInput], batch: u64) -> Vec<JobOutcome> {
        let ctx = WorkflowContext {
            gateway: &self.gateway,
            sandbox: &self.sandbox,
            prompts: &self.prompts,
            budgets: &self.config.budgets,
        };
        let slots: Vec<Mutex<Option<JobOutcome>>> = queries.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_workers.max(1).min(queries.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= queries.len() {
                        break;
                    }
                    if let Some(j) = self.config.jitter {
                        let mut rng = rand::rngs::StdRng::seed_from_u64(j.seed ^ (batch << 32) ^ i as u64);
                        std::thread::sleep(Duration::from_millis(rng.gen_range(0..=j.max_ms)));
                    }
                    let outcome = run_query(&queries[i], snapshot, ctx);
                    *slots[i].lock().expect("job slot poisoned") = Some(outcome);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("job slot poisoned").expect("every job ran")).collect()
    }

    /// Runs one batch against the current snapshot and commits the result.
    pub fn run_batch(&self, queries: &[QueryInput]) -> Result<BatchOutcome, EngineError> {
        if queries.is_empty() {
            return Err(EngineError::EmptyBatch);
        }
        let snapshot = self.snapshot();
        let batch = *self.next_batch.lock().expect("batch counter poisoned");
        self.trace.append(
            EventKind::BatchBoundary,
            json!({
                "edge": "start",
                "batch": batch,
                "query_ids": queries.iter().map(|q| &q.id).collect::<Vec<_>>(),
                "snapshot_step": snapshot.step(),
                "library_size": snapshot.len(),
                "listing_digest": snapshot.listing_digest(),
            }),
        )?;

        let outcomes = self.run_jobs(&snapshot, queries, batch);

        let mut job_events: Vec<EventDraft> = Vec::new();
        let mut locals = Vec::new();
        let mut global_stats: BTreeMap<String, ToolStats> = BTreeMap::new();
        for o in &outcomes {
            job_events.extend(o.events.iter().cloned());
            locals.extend(o.local_tools.iter().cloned());
            for (name, s) in &o.global_stats {
                global_stats.entry(name.clone()).or_default().add(s);
            }
        }
        self.trace.append_all(job_events)?;

        let options = AbsorbOptions {
            reconsolidate_globals: self.config.reconsolidate_globals,
            aggregator_retries: self.config.aggregator_retries,
        };
        let result = absorb(&snapshot, locals, &self.gateway, &self.prompts, options, batch);
        self.trace.append_all(result.events.clone())?;

        let next = snapshot.with_stats_delta(&global_stats).commit(result.delta.clone())?;
        self.trace.append(
            EventKind::Commit,
            json!({
                "batch": batch,
                "step": next.step(),
                "library_size": next.len(),
                "new_tools": result.delta.new_tools.iter().map(|t| &t.name).collect::<Vec<_>>(),
                "aliases": result.delta.aliases,
                "listing_digest": next.listing_digest(),
            }),
        )?;
        let samples: Vec<QuerySample> = outcomes.iter().map(|o| o.sample.clone()).collect();
        let cumulative = self.metrics().samples.len() + samples.len();
        self.trace.append(EventKind::BatchBoundary, json!({"edge": "end", "batch": batch, "cumulative_queries": cumulative}))?;

        let next = Arc::new(next);
        *self.head.write().expect("head lock poisoned") = next.clone();
        *self.next_batch.lock().expect("batch counter poisoned") = batch + 1;
        self.metrics.lock().expect("metrics lock poisoned").push_batch(batch, samples.clone(), next.len() as u64);
        Ok(BatchOutcome {
            batch,
            answers: outcomes.iter().map(|o| AnswerRecord::new(&o.query_id, &o.answer, o.completed)).collect(),
            samples,
            observed_listings: outcomes.iter().map(|o| o.listing_digest.clone()).collect(),
            absorb: result,
            snapshot: next,
        })
    }

    /// Folds `run_batch` over consecutive batches of `queries[offset..]`.
    /// `stop` is checked between batches.
    pub fn run_stream(
        &self,
        queries: &[QueryInput],
        offset: usize,
        stop: &AtomicBool,
        sink: &mut dyn StreamSink,
    ) -> Result<StreamOutcome, EngineError> {
        let b = self.config.batch_size;
        if b == 0 {
            return Err(EngineError::EmptyBatch);
        }
        let mut offset = offset.min(queries.len());
        let mut answers = Vec::new();
        while offset < queries.len() {
            if stop.load(Ordering::SeqCst) {
                return Ok(StreamOutcome { status: StreamStatus::Interrupted { offset }, offset, answers });
            }
            let end = (offset + b).min(queries.len());
            let outcome = self.run_batch(&queries[offset..end])?;
            answers.extend(outcome.answers.iter().cloned());
            offset = end;
            if let Err(reason) = sink.on_batch(&outcome, offset) {
                return Ok(StreamOutcome { status: StreamStatus::SinkFailed { offset, reason }, offset, answers });
            }
        }
        Ok(StreamOutcome { status: StreamStatus::Completed, offset, answers })
    }

    /// A checkpoint for the current head at `offset`.
    pub fn checkpoint(&self, offset: usize, snapshot_path: PathBuf) -> Checkpoint {
        Checkpoint {
            offset,
            next_batch: *self.next_batch.lock().expect("batch counter poisoned"),
            step: self.snapshot().step(),
            snapshot_path,
            sums: self.cumulative_sums(),
        }
    }
}

/// Consecutive batch sizes for a stream of `n` queries.
pub fn batch_sizes(n: usize, b: usize) -> Vec<usize> {
    if b == 0 {
        return Vec::new();
    }
    (0..n).step_by(b).map(|start| b.min(n - start)).collect()
}
