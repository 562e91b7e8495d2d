//! The post-hoc subcommands: inspect, validate-tool, replay, export.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use insitu::metrics::{self, ExportOptions, RunMetrics};
use insitu::registry::{Provenance, RegistrySnapshot, ToolRecord};
use insitu::sandbox::{default_python, validate_source, Limits, Sandbox, SandboxConfig, SingleFlight, VenvProvisioner};
use insitu::trace::read_trace;

fn provenance_label(p: &Provenance) -> String {
    match p {
        Provenance::Synthesized { step, query_id } => format!("synthesized at step {step} for {query_id}"),
        Provenance::Merged { step, member_names } => format!("merged at step {step} from {}", member_names.join(", ")),
        Provenance::Imported { origin } => format!("imported from {origin}"),
    }
}

/// Live tools, most invoked first; ties in name order.
pub fn inspect_rows(snapshot: &RegistrySnapshot) -> Vec<&ToolRecord> {
    let mut rows: Vec<&ToolRecord> = snapshot.records().collect();
    rows.sort_by(|a, b| b.stats.invocations.cmp(&a.stats.invocations).then_with(|| a.name.cmp(&b.name)));
    rows
}

pub fn cmd_inspect(library: &Path, as_json: bool) -> Result<()> {
    let snapshot = RegistrySnapshot::load(library).with_context(|| format!("cannot load library {}", library.display()))?;
    let rows = inspect_rows(&snapshot);
    if as_json {
        for r in rows {
            let row = json!({
                "name": r.name,
                "description": r.description,
                "provenance": r.provenance,
                "invocations": r.stats.invocations,
                "successes": r.stats.successes,
                "tool_output_tokens": r.stats.tool_output_tokens,
            });
            println!("{row}");
        }
        return Ok(());
    }
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>11}  {:>9}  {:>11}  {:<40}  DESCRIPTION", "NAME", "INVOCATIONS", "SUCCESSES", "TOKENS", "PROVENANCE");
    for r in &rows {
        println!(
            "{:<width$}  {:>11}  {:>9}  {:>11}  {:<40}  {}",
            r.name,
            r.stats.invocations,
            r.stats.successes,
            r.stats.tool_output_tokens,
            provenance_label(&r.provenance),
            r.description.lines().next().unwrap_or_default()
        );
    }
    println!(
        "{} tools at step {}, {} retired, {} aliases",
        rows.len(),
        snapshot.step(),
        snapshot.retired().len(),
        snapshot.alias_map().len()
    );
    Ok(())
}

pub fn cmd_validate_tool(
    source: &Path,
    name: Option<&str>,
    input: Option<&str>,
    harness: Option<PathBuf>,
    python: Option<PathBuf>,
    timeout_secs: f64,
) -> Result<()> {
    let text = std::fs::read_to_string(source).with_context(|| format!("cannot read {}", source.display()))?;
    let artifact = match validate_source(&text, name) {
        Ok(a) => a,
        Err(e) => {
            println!("invalid: {e}");
            bail!("{} failed validation: {e}", source.display());
        }
    };
    println!("valid: {}", artifact.name);
    println!("  dependencies: [{}]", artifact.dependencies.join(", "));
    println!("  input schema: {}", artifact.input_schema);
    println!("  output schema: {}", artifact.output_schema);
    println!("  digest: {}", artifact.digest);

    let (Some(input), Some(harness)) = (input, harness) else { return Ok(()) };
    let payload: Value = serde_json::from_str(input).context("--input is not valid JSON")?;
    let work = tempfile::tempdir().context("cannot create a scratch directory")?;
    let python = python.unwrap_or_else(default_python);
    let provisioner = Arc::new(SingleFlight::new(VenvProvisioner::new(python, work.path().join("envs"))));
    if !(timeout_secs.is_finite() && timeout_secs > 0.0) {
        bail!("--timeout-secs must be positive");
    }
    let config = SandboxConfig {
        limits: Limits { timeout: Duration::from_secs_f64(timeout_secs), ..Limits::default() },
        ..SandboxConfig::new(work.path().join("sandbox"), harness)
    };
    let sandbox = Sandbox::new(config, provisioner)?;
    let result = sandbox.invoke(&artifact, &payload);
    println!("run: {} {}", result.status.as_str(), result.payload);
    if !result.is_ok() {
        return Err(anyhow!("tool run ended with {}", result.status.as_str()));
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

pub fn summary_json(m: &RunMetrics) -> Value {
    let sums = m.sums();
    json!({
        "batches": m.batches.len(),
        "queries": sums.queries,
        "tools_created": sums.c,
        "invocations": sums.u,
        "successes": sums.successes,
        "tool_tokens": sums.tool_tokens,
        "egl": m.egl(),
        "success_rate": m.success_rate(),
        "avg_tokens_per_invocation": m.avg_tokens(),
        "final_library_size": m.final_library_size(),
    })
}

pub fn print_summary(m: &RunMetrics) {
    let sums = m.sums();
    println!("queries: {} in {} batches", sums.queries, m.batches.len());
    println!("tools created: {}, invocations: {} ({} ok)", sums.c, sums.u, sums.successes);
    println!("EGL: {}", fmt_opt(m.egl()));
    println!("success rate: {}", fmt_opt(m.success_rate()));
    println!("avg tokens per invocation: {}", fmt_opt(m.avg_tokens()));
    println!("library size: {}", m.final_library_size().map(|n| n.to_string()).unwrap_or_else(|| "n/a".into()));
}

pub fn replay_file(trace: &Path) -> Result<RunMetrics> {
    let events = read_trace(trace).with_context(|| format!("cannot verify trace {}", trace.display()))?;
    metrics::replay(&events).with_context(|| format!("cannot replay trace {}", trace.display()))
}

pub fn cmd_replay(trace: &Path, as_json: bool) -> Result<()> {
    let m = replay_file(trace)?;
    if as_json {
        println!("{}", summary_json(&m));
    } else {
        print_summary(&m);
    }
    Ok(())
}

pub fn cmd_export(trace: &Path, out_dir: &Path, egl_window: Option<usize>) -> Result<()> {
    let m = replay_file(trace)?;
    for path in metrics::export_curves(&m, out_dir, ExportOptions { egl_window })? {
        println!("{}", path.display());
    }
    Ok(())
}
