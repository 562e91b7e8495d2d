//! Tool validation and one-shot subprocess execution.
//!
//! Each invocation spawns the harness interpreter in a fresh scratch
//! directory, writes `{"input": <payload>}` to its stdin and reads exactly
//! one protocol document from its stdout:
//!
//! - `{"status":"ok","output":<payload>}` on success
//! - `{"status":"error","kind":<string>,"message":<string>}` on a tool error
//!
//! The harness exits 0 in both cases. Anything else (nonzero exit, extra
//! output, unknown keys, an ok payload violating the output schema) is a
//! protocol error. Children run in their own process group so a timeout kills
//! the whole tree. When the kernel supports Landlock, writes are confined to
//! the scratch directory.

mod artifact;
mod confine;
mod provision;
mod pyliteral;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use artifact::{
    annotation_schema, model_fields, parse_meta, schema_from_fields, source_digest, validate_artifact, validate_source,
    ArtifactError, ArtifactErrorKind, ModelField, ToolArtifact, ToolMeta,
};
pub use provision::{
    default_python, environment_key, normalized_set, package_name, EnvRef, IndexedProvisioner, ProvisionError,
    Provisioner, SingleFlight, VenvProvisioner,
};

use crate::schema::validate_instance;

/// Appended to output text cut at the byte limit.
pub const TRUNCATION_MARKER: &str = "...[truncated]";

const STDERR_TAIL: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_output_bytes: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(120), max_output_bytes: 64 * 1024 }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationStatus {
    Ok,
    ToolError,
    ProtocolError,
    Timeout,
}

impl InvocationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            InvocationStatus::Ok => "ok",
            InvocationStatus::ToolError => "tool_error",
            InvocationStatus::ProtocolError => "protocol_error",
            InvocationStatus::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationResult {
    pub status: InvocationStatus,
    /// The output payload when `status` is ok, else `{"kind", "message"}`.
    pub payload: Value,
    pub wall_time: Duration,
    /// Serialized payload as injected into the executor context, bounded by
    /// `max_output_bytes`.
    pub output_text: String,
}

impl InvocationResult {
    fn error(status: InvocationStatus, kind: &str, message: impl Into<String>, wall_time: Duration, limit: usize) -> Self {
        let payload = json!({"kind": kind, "message": message.into()});
        let output_text = truncate_output(&payload.to_string(), limit);
        Self { status, payload, wall_time, output_text }
    }

    pub fn is_ok(&self) -> bool {
        self.status == InvocationStatus::Ok
    }
}

/// Cuts `text` so that the result, marker included, fits in `max_bytes`.
pub fn truncate_output(text: &str, max_bytes: usize) -> String {
    if text.len() <= max_bytes {
        return text.to_string();
    }
    let budget = max_bytes.saturating_sub(TRUNCATION_MARKER.len());
    let mut cut = budget;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    let mut out = text[..cut].to_string();
    if max_bytes >= TRUNCATION_MARKER.len() {
        out.push_str(TRUNCATION_MARKER);
    }
    out
}

/// The protocol document a harness writes on stdout.
#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolDocument {
    Ok(Value),
    Error { kind: String, message: String },
}

/// Parses one protocol document; no keys beyond the protocol's are accepted.
pub fn parse_protocol_document(stdout: &str) -> Result<ProtocolDocument, String> {
    let value: Value = serde_json::from_str(stdout.trim()).map_err(|e| format!("unparseable output: {e}"))?;
    let obj = value.as_object().ok_or("protocol document is not an object")?;
    let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    match obj.get("status").and_then(Value::as_str) {
        Some("ok") if keys.len() == 2 && obj.contains_key("output") => Ok(ProtocolDocument::Ok(obj["output"].clone())),
        Some("error") if keys.len() == 3 => match (obj.get("kind"), obj.get("message")) {
            (Some(Value::String(kind)), Some(Value::String(message))) => {
                Ok(ProtocolDocument::Error { kind: kind.clone(), message: message.clone() })
            }
            _ => Err("error document needs string `kind` and `message`".into()),
        },
        _ => Err(format!("malformed protocol document with keys {keys:?}")),
    }
}

/// The request document written to the child's stdin.
pub fn request_document(payload: &Value) -> String {
    json!({"input": payload}).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Holds `artifacts/`, `scratch/` and `cache/`.
    pub root: PathBuf,
    /// Harness script run as `<python> <harness> <tool source>`.
    pub harness: PathBuf,
    pub limits: Limits,
    pub max_concurrent: usize,
    /// Host environment variables passed through to tools.
    pub env_allowlist: Vec<String>,
    pub keep_scratch: bool,
    /// Confine writes to the scratch directory when the kernel allows it.
    pub confine_writes: bool,
}

impl SandboxConfig {
    pub fn new(root: impl Into<PathBuf>, harness: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            harness: harness.into(),
            limits: Limits::default(),
            max_concurrent: 8,
            env_allowlist: Vec::new(),
            keep_scratch: false,
            confine_writes: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox setup failed at {path}: {source}")]
    Setup { path: PathBuf, source: io::Error },
    #[error("harness {0} does not exist")]
    MissingHarness(PathBuf),
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct Sandbox {
    config: SandboxConfig,
    provisioner: Arc<dyn Provisioner>,
    slots: Semaphore,
    confined: bool,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox").field("config", &self.config).field("confined", &self.confined).finish()
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig, provisioner: Arc<dyn Provisioner>) -> Result<Self, SandboxError> {
        if !config.harness.is_file() {
            return Err(SandboxError::MissingHarness(config.harness.clone()));
        }
        for sub in ["artifacts", "scratch", "cache"] {
            let path = config.root.join(sub);
            fs::create_dir_all(&path).map_err(|source| SandboxError::Setup { path, source })?;
        }
        let root = fs::canonicalize(&config.root).map_err(|source| SandboxError::Setup { path: config.root.clone(), source })?;
        let confined = config.confine_writes && confine::abi_version().is_some();
        if config.confine_writes && !confined {
            log::warn!("Landlock unavailable; tool writes are not confined to the scratch directory");
        }
        let slots = Semaphore { permits: Mutex::new(config.max_concurrent.max(1)), cv: Condvar::new() };
        Ok(Self { config: SandboxConfig { root, ..config }, provisioner, slots, confined })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn limits(&self) -> Limits {
        self.config.limits
    }

    /// Whether child writes are kernel-confined to their scratch directory.
    pub fn writes_confined(&self) -> bool {
        self.confined
    }

    pub fn scratch_root(&self) -> PathBuf {
        self.config.root.join("scratch")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.config.root.join("cache")
    }

    pub fn provision(&self, artifact: &ToolArtifact) -> Result<EnvRef, ProvisionError> {
        self.provisioner.provision(&artifact.dependencies)
    }

    pub fn invoke(&self, artifact: &ToolArtifact, payload: &Value) -> InvocationResult {
        self.invoke_with_limits(artifact, payload, self.config.limits)
    }

    pub fn invoke_with_limits(&self, artifact: &ToolArtifact, payload: &Value, limits: Limits) -> InvocationResult {
        let started = Instant::now();
        let max = limits.max_output_bytes;
        if let Err(errors) = validate_instance(&artifact.input_schema, payload) {
            return InvocationResult::error(InvocationStatus::ToolError, "ValidationError", errors.join("; "), started.elapsed(), max);
        }
        let env = match self.provision(artifact) {
            Ok(env) => env,
            Err(e) => return InvocationResult::error(InvocationStatus::ToolError, "ProvisioningError", e.to_string(), started.elapsed(), max),
        };
        let tool_path = match self.store_artifact(artifact) {
            Ok(p) => p,
            Err(e) => return InvocationResult::error(InvocationStatus::ProtocolError, "SandboxError", e.to_string(), started.elapsed(), max),
        };
        let scratch = self.scratch_root().join(uuid::Uuid::new_v4().simple().to_string());
        if let Err(e) = fs::create_dir_all(scratch.join("tmp")) {
            return InvocationResult::error(InvocationStatus::ProtocolError, "SandboxError", e.to_string(), started.elapsed(), max);
        }
        let _permit = self.slots.acquire();
        let started = Instant::now();
        let outcome = self.run_child(&env, &tool_path, &scratch, payload, limits.timeout);
        let wall_time = started.elapsed();
        if !self.config.keep_scratch {
            let _ = fs::remove_dir_all(&scratch);
        }
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => return InvocationResult::error(InvocationStatus::ProtocolError, "SpawnError", e.to_string(), wall_time, max),
        };
        if outcome.timed_out {
            return InvocationResult::error(
                InvocationStatus::Timeout,
                "Timeout",
                format!("exceeded {:.3}s limit; process group killed", limits.timeout.as_secs_f64()),
                wall_time,
                max,
            );
        }
        if !outcome.status.success() {
            return InvocationResult::error(
                InvocationStatus::ProtocolError,
                "ProtocolError",
                format!("harness exited with {}: {}", outcome.status, outcome.stderr_tail),
                wall_time,
                max,
            );
        }
        if outcome.stdout_overflow {
            return InvocationResult::error(InvocationStatus::ProtocolError, "ProtocolError", "stdout exceeded the read limit", wall_time, max);
        }
        let stdout = String::from_utf8_lossy(&outcome.stdout);
        match parse_protocol_document(&stdout) {
            Err(e) => InvocationResult::error(InvocationStatus::ProtocolError, "ProtocolError", e, wall_time, max),
            Ok(ProtocolDocument::Error { kind, message }) => {
                InvocationResult::error(InvocationStatus::ToolError, &kind, message, wall_time, max)
            }
            Ok(ProtocolDocument::Ok(output)) => match validate_instance(&artifact.output_schema, &output) {
                Err(errors) => InvocationResult::error(
                    InvocationStatus::ProtocolError,
                    "OutputSchemaViolation",
                    errors.join("; "),
                    wall_time,
                    max,
                ),
                Ok(()) => {
                    let output_text = truncate_output(&output.to_string(), max);
                    InvocationResult { status: InvocationStatus::Ok, payload: output, wall_time, output_text }
                }
            },
        }
    }

    /// Writes the source to `artifacts/<digest>.py` once; content-addressed.
    fn store_artifact(&self, artifact: &ToolArtifact) -> io::Result<PathBuf> {
        let path = self.config.root.join("artifacts").join(format!("{}.py", artifact.digest));
        if !path.exists() {
            let tmp = path.with_extension(format!("{}.tmp", uuid::Uuid::new_v4().simple()));
            fs::write(&tmp, &artifact.source)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(path)
    }

    fn child_env(&self, scratch: &Path) -> BTreeMap<String, String> {
        let mut env = BTreeMap::new();
        env.insert("PATH".into(), std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()));
        env.insert("HOME".into(), scratch.display().to_string());
        env.insert("TMPDIR".into(), scratch.join("tmp").display().to_string());
        env.insert("LANG".into(), "C.UTF-8".into());
        env.insert("PYTHONDONTWRITEBYTECODE".into(), "1".into());
        env.insert("PYTHONIOENCODING".into(), "utf-8".into());
        env.insert("TOOL_SCRATCH_DIR".into(), scratch.display().to_string());
        env.insert("TOOL_CACHE_DIR".into(), self.cache_dir().display().to_string());
        for name in &self.config.env_allowlist {
            if let Ok(value) = std::env::var(name) {
                env.insert(name.clone(), value);
            }
        }
        env
    }

    fn run_child(&self, env: &EnvRef, tool: &Path, scratch: &Path, payload: &Value, timeout: Duration) -> io::Result<ChildOutcome> {
        use std::os::unix::process::CommandExt;

        let mut cmd = Command::new(&env.python);
        cmd.arg(&self.config.harness)
            .arg(tool)
            .current_dir(scratch)
            .env_clear()
            .envs(self.child_env(scratch))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        let ruleset = if self.confined {
            Some(confine::writes_confined_to(&[scratch], &[Path::new("/dev/null")])?)
        } else {
            None
        };
        if let Some(rs) = &ruleset {
            let fd = rs.raw_fd();
            // SAFETY: restrict_self only issues prctl and a raw syscall.
            unsafe {
                cmd.pre_exec(move || confine::restrict_self(fd));
            }
        }
        let mut child = cmd.spawn()?;
        drop(ruleset);

        let stdout_cap = 16 * 1024 * 1024;
        let stdout = child.stdout.take().expect("piped");
        let stderr = child.stderr.take().expect("piped");
        let out_reader = thread::spawn(move || read_capped(stdout, stdout_cap));
        let err_reader = thread::spawn(move || read_capped(stderr, 64 * 1024));
        if let Some(mut stdin) = child.stdin.take() {
            // A child that exits without reading closes the pipe; that is its business.
            let _ = stdin.write_all(request_document(payload).as_bytes());
        }

        let (status, timed_out) = wait_with_deadline(&mut child, timeout)?;
        let (stdout, stdout_overflow) = out_reader.join().unwrap_or_default();
        let (stderr, _) = err_reader.join().unwrap_or_default();
        let stderr = String::from_utf8_lossy(&stderr);
        let tail_start = stderr.len().saturating_sub(STDERR_TAIL);
        let tail_start = (tail_start..stderr.len()).find(|i| stderr.is_char_boundary(*i)).unwrap_or(stderr.len());
        Ok(ChildOutcome { status, timed_out, stdout, stdout_overflow, stderr_tail: stderr[tail_start..].trim().to_string() })
    }
}

struct ChildOutcome {
    status: ExitStatus,
    timed_out: bool,
    stdout: Vec<u8>,
    stdout_overflow: bool,
    stderr_tail: String,
}

/// Reads up to `cap` bytes and drains the rest so the writer never blocks.
fn read_capped(mut pipe: impl Read, cap: usize) -> (Vec<u8>, bool) {
    let mut buf = Vec::new();
    let _ = (&mut pipe).take(cap as u64).read_to_end(&mut buf);
    let overflow = io::copy(&mut pipe, &mut io::sink()).map(|n| n > 0).unwrap_or(false);
    (buf, overflow)
}

fn wait_with_deadline(child: &mut Child, timeout: Duration) -> io::Result<(ExitStatus, bool)> {
    let deadline = Instant::now() + timeout;
    let mut pause = Duration::from_millis(1);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((status, false));
        }
        let now = Instant::now();
        if now >= deadline {
            let pgid = child.id() as libc::pid_t;
            // SAFETY: signalling our own child's process group.
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
            let status = child.wait()?;
            return Ok((status, true));
        }
        thread::sleep(pause.min(deadline - now));
        pause = (pause * 2).min(Duration::from_millis(20));
    }
}
