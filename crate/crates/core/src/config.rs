//! Run configuration and query stream input.
//!
//! Credentials are never stored here, only the name of the environment
//! variable that holds them.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::evolution::EngineConfig;
use crate::sandbox::Limits;
use crate::workflow::{Budgets, QueryInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    ZeroStart,
    WarmStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderProfile {
    /// An OpenAI-compatible chat completions endpoint.
    Openai {
        endpoint: String,
        model: String,
        api_key_env: String,
        #[serde(default)]
        native_functions: bool,
        /// Saves every exchange as a replayable script at the end of the run.
        #[serde(default)]
        record_script: Option<PathBuf>,
    },
    /// Replays a recorded script.
    Scripted { script: PathBuf },
}

impl Default for ProviderProfile {
    fn default() -> Self {
        ProviderProfile::Scripted { script: PathBuf::from("script.json") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvisionerKind {
    /// One virtual environment per dependency set, installed with pip.
    #[default]
    Venv,
    /// The base interpreter only; dependencies must be importable there.
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSettings {
    pub timeout_secs: f64,
    pub max_output_bytes: usize,
    pub max_concurrent: usize,
    pub env_allowlist: Vec<String>,
    pub confine_writes: bool,
    /// Harness script that speaks the tool protocol.
    pub harness: Option<PathBuf>,
    pub python: Option<PathBuf>,
    pub provisioner: ProvisionerKind,
    /// Packages the base interpreter provides, for the `base` provisioner.
    pub base_packages: Vec<String>,
    pub pip_args: Vec<String>,
}

impl Default for SandboxSettings {
    fn default() -> Self {
        let limits = Limits::default();
        Self {
            timeout_secs: limits.timeout.as_secs_f64(),
            max_output_bytes: limits.max_output_bytes,
            max_concurrent: 8,
            env_allowlist: Vec::new(),
            confine_writes: true,
            harness: None,
            python: None,
            provisioner: ProvisionerKind::default(),
            base_packages: vec!["pydantic".to_string()],
            pip_args: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Query stream: plain lines or JSON records `{"id", "query"}`.
    pub stream: Option<PathBuf>,
    /// Library to start from in warm-start mode.
    pub library_in: Option<PathBuf>,
    /// Holds the trace, answers, library, exports and checkpoint.
    pub out_dir: PathBuf,
    /// Sandbox working root; defaults to `<out_dir>/sandbox`.
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub max_workers: usize,
    pub reconsolidate_globals: bool,
    /// Window for the exported EGL curve; cumulative when absent.
    pub egl_window: Option<usize>,
    pub provider: ProviderProfile,
    pub budgets: Budgets,
    pub sandbox: SandboxSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            batch_size: 16,
            max_workers: 16,
            reconsolidate_globals: false,
            egl_window: None,
            provider: ProviderProfile::default(),
            budgets: Budgets::default(),
            sandbox: SandboxSettings::default(),
            paths: Paths { out_dir: PathBuf::from("run"), ..Paths::default() },
        }
    }
}

/// Offending fields, each with the reason.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid configuration: {}", .0.iter().map(|(f, r)| format!("{f}: {r}")).collect::<Vec<_>>().join("; "))]
pub struct ConfigError(pub Vec<(String, String)>);

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        if self.mode == Mode::WarmStart && self.paths.library_in.is_none() {
            bad.push(("paths.library_in".into(), "required in warm-start mode".into()));
        }
        if self.batch_size == 0 {
            bad.push(("batch_size".into(), "must be at least 1".into()));
        }
        if self.max_workers == 0 {
            bad.push(("max_workers".into(), "must be at least 1".into()));
        }
        for field in self.budgets.invalid_fields() {
            bad.push((format!("budgets.{field}"), "must be at least 1".into()));
        }
        if !(self.sandbox.timeout_secs.is_finite() && self.sandbox.timeout_secs > 0.0) {
            bad.push(("sandbox.timeout_secs".into(), "must be a positive number".into()));
        }
        if self.sandbox.max_output_bytes == 0 {
            bad.push(("sandbox.max_output_bytes".into(), "must be at least 1".into()));
        }
        if self.sandbox.max_concurrent == 0 {
            bad.push(("sandbox.max_concurrent".into(), "must be at least 1".into()));
        }
        if self.paths.stream.is_none() {
            bad.push(("paths.stream".into(), "a query stream is required".into()));
        }
        if let ProviderProfile::Openai { endpoint, api_key_env, .. } = &self.provider {
            if endpoint.is_empty() {
                bad.push(("provider.endpoint".into(), "must not be empty".into()));
            }
            if api_key_env.is_empty() {
                bad.push(("provider.api_key_env".into(), "must name an environment variable".into()));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(bad))
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            timeout: std::time::Duration::from_secs_f64(self.sandbox.timeout_secs),
            max_output_bytes: self.sandbox.max_output_bytes,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            batch_size: self.batch_size,
            max_workers: self.max_workers,
            budgets: self.budgets,
            reconsolidate_globals: self.reconsolidate_globals,
            ..EngineConfig::default()
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.paths.work_dir.clone().unwrap_or_else(|| self.paths.out_dir.join("sandbox"))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamRecord {
    id: String,
    query: String,
}

/// Parses a query stream. Each non-empty line is either a JSON record
/// `{"id": ..., "query": ...}` or a plain query that gets the id `qNNNN`
/// from its position among queries.
pub fn parse_stream(text: &str) -> Result<Vec<QueryInput>, String> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let query = if trimmed.starts_with('{') {
            let r: StreamRecord = serde_json::from_str(trimmed).map_err(|e| format!("line {}: {e}", lineno + 1))?;
            QueryInput::new(r.id, r.query)
        } else {
            QueryInput::new(format!("q{:04}", out.len() + 1), trimmed)
        };
        if query.text.trim().is_empty() {
            return Err(format!("line {}: empty query", lineno + 1));
        }
        if !ids.insert(query.id.clone()) {
            return Err(format!("line {}: duplicate query id `{}`", lineno + 1, query.id));
        }
        out.push(query);
    }
    Ok(out)
}
