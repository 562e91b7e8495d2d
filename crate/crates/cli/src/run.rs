//! `insitu run`: configuration assembly, the evolution loop, and the files
//! a run leaves behind.
//!
//! Layout of `out_dir`:
//! `trace.ndjson`, `answers.jsonl`, `checkpoint.json`, `snapshots/step-NNNN/`
//! (one per committed batch), `library/` (final), `exports/`, `sandbox/`.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};

use insitu::config::{parse_stream, Mode, ProviderProfile, ProvisionerKind, RunConfig};
use insitu::evolution::{BatchOutcome, Checkpoint, StreamStatus};
use insitu::gateway::{ChatProvider, ModelRouting, OpenAiConfig, OpenAiProvider, RecordingProvider, ScriptedProvider};
use insitu::metrics::{self, ExportOptions};
use insitu::prompts::PromptSuite;
use insitu::registry::RegistrySnapshot;
use insitu::sandbox::{default_python, IndexedProvisioner, Provisioner, Sandbox, SandboxConfig, SingleFlight, VenvProvisioner};
use insitu::trace::{read_trace, Clock, LogicalClock, SystemClock, TraceWriter};
use insitu::{Engine, Gateway};

use crate::commands::{print_summary, replay_file};
use crate::{Failure, RunArgs};

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Failure::Config(msg.into()))
}

/// Relative paths in a config file are taken from the file's directory.
fn anchor(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

fn anchor_opt(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        anchor(base, p);
    }
}

pub fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
            let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            anchor_opt(base, &mut cfg.paths.stream);
            anchor_opt(base, &mut cfg.paths.library_in);
            anchor(base, &mut cfg.paths.out_dir);
            anchor_opt(base, &mut cfg.paths.work_dir);
            anchor_opt(base, &mut cfg.sandbox.harness);
            if cfg.sandbox.python.as_ref().is_some_and(|p| p.components().count() > 1) {
                anchor_opt(base, &mut cfg.sandbox.python);
            }
            match &mut cfg.provider {
                ProviderProfile::Scripted { script } => anchor(base, script),
                ProviderProfile::Openai { record_script, .. } => anchor_opt(base, record_script),
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(v) = &args.stream {
        cfg.paths.stream = Some(v.clone());
    }
    if let Some(v) = &args.out_dir {
        cfg.paths.out_dir = v.clone();
    }
    if let Some(v) = args.mode {
        cfg.mode = v;
    }
    if let Some(v) = &args.library_in {
        cfg.paths.library_in = Some(v.clone());
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.max_workers {
        cfg.max_workers = v;
    }
    if let Some(v) = &args.script {
        cfg.provider = ProviderProfile::Scripted { script: v.clone() };
    }
    if let Some(v) = &args.harness {
        cfg.sandbox.harness = Some(v.clone());
    }
    if let Some(v) = &args.python {
        cfg.sandbox.python = Some(v.clone());
    }
    if let Some(v) = args.provisioner {
        cfg.sandbox.provisioner = v;
    }
    if let Some(v) = args.timeout_secs {
        cfg.sandbox.timeout_secs = v;
    }
    if args.egl_window.is_some() {
        cfg.egl_window = args.egl_window;
    }
    if args.reconsolidate_globals {
        cfg.reconsolidate_globals = true;
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    if cfg.sandbox.harness.is_none() {
        return Err(config_error("invalid configuration: sandbox.harness: a harness script is required"));
    }
    Ok(cfg)
}

struct ProviderSetup {
    provider: Arc<dyn ChatProvider>,
    routing: ModelRouting,
    native_functions: bool,
    /// Handle for saving recorded exchanges, and where to.
    recorder: Option<(Arc<RecordingProvider<OpenAiProvider>>, PathBuf)>,
}

fn build_provider(cfg: &RunConfig) -> Result<ProviderSetup> {
    match &cfg.provider {
        ProviderProfile::Scripted { script } => {
            let provider = ScriptedProvider::from_file(script).map_err(|e| config_error(e.to_string()))?;
            Ok(ProviderSetup { provider: Arc::new(provider), routing: ModelRouting::default(), native_functions: false, recorder: None })
        }
        ProviderProfile::Openai { endpoint, model, api_key_env, native_functions, record_script } => {
            let provider = OpenAiProvider::new(OpenAiConfig::new(endpoint.clone(), api_key_env.clone()))
                .map_err(|e| config_error(e.to_string()))?;
            let routing = ModelRouting { default_model: model.clone(), ..ModelRouting::default() };
            let native_functions = *native_functions;
            Ok(match record_script {
                Some(path) => {
                    let recorder = Arc::new(RecordingProvider::new(provider));
                    ProviderSetup { provider: recorder.clone(), routing, native_functions, recorder: Some((recorder, path.clone())) }
                }
                None => ProviderSetup { provider: Arc::new(provider), routing, native_functions, recorder: None },
            })
        }
    }
}

fn build_sandbox(cfg: &RunConfig) -> Result<Sandbox> {
    let work = cfg.work_dir();
    let python = cfg.sandbox.python.clone().unwrap_or_else(default_python);
    let provisioner: Arc<dyn Provisioner> = match cfg.sandbox.provisioner {
        ProvisionerKind::Venv => Arc::new(SingleFlight::new(
            VenvProvisioner::new(python, work.join("envs")).with_pip_args(cfg.sandbox.pip_args.clone()),
        )),
        ProvisionerKind::Base => Arc::new(SingleFlight::new(IndexedProvisioner::new(python, &cfg.sandbox.base_packages))),
    };
    let harness = cfg.sandbox.harness.clone().expect("validated");
    let config = SandboxConfig {
        limits: cfg.limits(),
        max_concurrent: cfg.sandbox.max_concurrent,
        env_allowlist: cfg.sandbox.env_allowlist.clone(),
        confine_writes: cfg.sandbox.confine_writes,
        ..SandboxConfig::new(work, harness)
    };
    Sandbox::new(config, provisioner).map_err(|e| config_error(e.to_string()))
}

/// Scripted runs use a logical clock so their traces are reproducible.
fn clock(cfg: &RunConfig, start: u64) -> Box<dyn Clock> {
    match cfg.provider {
        ProviderProfile::Scripted { .. } => Box::new(LogicalClock::starting_at(start)),
        ProviderProfile::Openai { .. } => Box::new(SystemClock),
    }
}

struct Layout {
    trace: PathBuf,
    answers: PathBuf,
    checkpoint: PathBuf,
    snapshots: PathBuf,
    library: PathBuf,
    exports: PathBuf,
}

impl Layout {
    fn new(out: &Path) -> Self {
        Self {
            trace: out.join("trace.ndjson"),
            answers: out.join("answers.jsonl"),
            checkpoint: out.join("checkpoint.json"),
            snapshots: out.join("snapshots"),
            library: out.join("library"),
            exports: out.join("exports"),
        }
    }
}

pub fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let stream_path = cfg.paths.stream.clone().expect("validated");
    let text = fs::read_to_string(&stream_path).map_err(|e| config_error(format!("cannot read stream {}: {e}", stream_path.display())))?;
    let queries = parse_stream(&text).map_err(|e| config_error(format!("{}: {e}", stream_path.display())))?;
    let out = &cfg.paths.out_dir;
    let layout = Layout::new(out);

    let resume = if args.resume {
        let cp = Checkpoint::load(&layout.checkpoint)
            .map_err(|e| config_error(format!("--resume needs {}: {e}", layout.checkpoint.display())))?;
        if cp.offset > queries.len() {
            return Err(config_error(format!("checkpoint offset {} exceeds the stream length {}", cp.offset, queries.len())));
        }
        Some(cp)
    } else {
        if layout.trace.exists() || layout.checkpoint.exists() {
            return Err(config_error(format!(
                "{} already holds a run; pass --resume or choose another out_dir",
                out.display()
            )));
        }
        None
    };

    let initial = match &resume {
        Some(cp) => RegistrySnapshot::load(&cp.snapshot_path)
            .with_context(|| format!("cannot load checkpoint snapshot {}", cp.snapshot_path.display()))?,
        None => match cfg.mode {
            Mode::ZeroStart => RegistrySnapshot::empty(),
            Mode::WarmStart => {
                let path = cfg.paths.library_in.as_ref().expect("validated");
                RegistrySnapshot::load(path).map_err(|e| config_error(format!("paths.library_in: {e}")))?
            }
        },
    };

    let ProviderSetup { provider, routing, native_functions, recorder } = build_provider(&cfg)?;
    let gateway = Gateway::new(provider).with_routing(routing).with_native_functions(native_functions);
    let sandbox = build_sandbox(&cfg)?;
    let prompts = PromptSuite::load().context("prompt suite failed to load")?;

    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let trace = match &resume {
        Some(cp) => {
            let events = read_trace(&layout.trace)?;
            if let Some(last) = metrics::replay(&events)?.batches.last() {
                if last.batch >= cp.next_batch {
                    return Err(anyhow!(
                        "the trace already holds batch {} beyond the checkpoint; it cannot be resumed safely",
                        last.batch
                    ));
                }
            }
            let next_ts = events.last().map(|e| e.ts + 1).unwrap_or(0);
            TraceWriter::resume(&layout.trace, clock(&cfg, next_ts))?
        }
        None => {
            fs::write(&layout.answers, "").with_context(|| format!("cannot create {}", layout.answers.display()))?;
            TraceWriter::create(&layout.trace, clock(&cfg, 0))?
        }
    };

    let mut engine =
        Engine::new(Arc::new(gateway), Arc::new(sandbox), Arc::new(prompts), cfg.engine_config(), Arc::new(trace), initial);
    if let Some(cp) = &resume {
        engine = engine.resume_from(cp);
    }
    let mut echo = serde_json::to_value(&cfg).context("config does not serialize")?;
    if let Some(cp) = &resume {
        echo["resumed_at_offset"] = cp.offset.into();
    }
    engine.write_header(echo)?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install the interrupt handler: {e}");
        }
    }

    let start = resume.as_ref().map(|cp| cp.offset).unwrap_or(0);
    let mut sink = |outcome: &BatchOutcome, next_offset: usize| -> Result<(), String> {
        let mut file = OpenOptions::new().append(true).open(&layout.answers).map_err(|e| e.to_string())?;
        for answer in &outcome.answers {
            let line = serde_json::to_string(answer).map_err(|e| e.to_string())?;
            writeln!(file, "{line}").map_err(|e| e.to_string())?;
        }
        let snapshot_dir = layout.snapshots.join(format!("step-{:04}", outcome.snapshot.step()));
        outcome.snapshot.persist(&snapshot_dir).map_err(|e| e.to_string())?;
        engine.checkpoint(next_offset, snapshot_dir).save(&layout.checkpoint).map_err(|e| e.to_string())?;
        let sums = engine.cumulative_sums();
        log::info!("batch {} committed: {} of {} queries, library size {}", outcome.batch, next_offset, queries.len(), outcome.snapshot.len());
        eprintln!(
            "batch {}: {}/{} queries, library {}, EGL {}",
            outcome.batch,
            next_offset,
            queries.len(),
            outcome.snapshot.len(),
            sums.egl().map(|e| format!("{e:.1}")).unwrap_or_else(|| "n/a".into())
        );
        Ok(())
    };
    let outcome = engine.run_stream(&queries, start, &stop, &mut sink)?;

    // Each committed batch wrote a checkpoint; this covers a run stopped before its first.
    if !layout.checkpoint.exists() {
        engine.checkpoint(0, persist_head(&engine, &layout.snapshots)?).save(&layout.checkpoint)?;
    }
    engine.snapshot().persist(&layout.library).with_context(|| format!("cannot write {}", layout.library.display()))?;
    if let Some((recorder, path)) = &recorder {
        recorder.save(path).with_context(|| format!("cannot save script {}", path.display()))?;
    }
    let replayed = replay_file(&layout.trace)?;
    metrics::export_curves(&replayed, &layout.exports, ExportOptions { egl_window: cfg.egl_window })?;

    match outcome.status {
        StreamStatus::Completed => {
            print_summary(&replayed);
            Ok(())
        }
        StreamStatus::Interrupted { offset } => Err(Failure::Interrupted { offset }.into()),
        StreamStatus::SinkFailed { offset, reason } => {
            Err(anyhow!("could not record the batch ending at query {offset}: {reason}"))
        }
    }
}

fn persist_head(engine: &Engine, snapshots: &Path) -> Result<PathBuf> {
    let snapshot = engine.snapshot();
    let dir = snapshots.join(format!("step-{:04}", snapshot.step()));
    snapshot.persist(&dir)?;
    Ok(dir)
}
