//! `insitu`: runs evolution streams and works with their artifacts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or usage
//! error, 3 interrupted with a checkpoint written.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use insitu::config::{Mode, ProvisionerKind};

#[derive(Parser)]
#[command(name = "insitu", version, about = "Self-evolving agent runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a query stream through batch evolution.
    Run(RunArgs),
    /// Print a library's tools, most invoked first.
    Inspect {
        library: PathBuf,
        /// Emit JSON rows instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Check a tool source against the tool contract; optionally run it.
    ValidateTool(ValidateArgs),
    /// Verify a trace and recompute its metrics.
    Replay {
        trace: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Recompute metric curves from a trace and write them as CSV.
    Export {
        trace: PathBuf,
        out_dir: PathBuf,
        /// Trailing window for the EGL curve; cumulative when absent.
        #[arg(long)]
        egl_window: Option<usize>,
    },
}

/// Flags override the config file, which overrides built-in defaults.
#[derive(Args, Default)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub stream: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub library_in: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_workers: Option<usize>,
    /// Replay a recorded script instead of the configured provider.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Harness script speaking the tool protocol.
    #[arg(long)]
    pub harness: Option<PathBuf>,
    #[arg(long)]
    pub python: Option<PathBuf>,
    #[arg(long, value_parser = parse_provisioner)]
    pub provisioner: Option<ProvisionerKind>,
    #[arg(long)]
    pub timeout_secs: Option<f64>,
    #[arg(long)]
    pub egl_window: Option<usize>,
    #[arg(long)]
    pub reconsolidate_globals: bool,
    /// Continue from `<out_dir>/checkpoint.json`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
struct ValidateArgs {
    source: PathBuf,
    /// Expected tool name; taken from the metadata when absent.
    #[arg(long)]
    name: Option<String>,
    /// JSON input to run the tool with after static validation.
    #[arg(long, requires = "harness")]
    input: Option<String>,
    #[arg(long)]
    harness: Option<PathBuf>,
    #[arg(long)]
    python: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "zero-start" => Ok(Mode::ZeroStart),
        "warm-start" => Ok(Mode::WarmStart),
        _ => Err("expected zero-start or warm-start".into()),
    }
}

fn parse_provisioner(s: &str) -> Result<ProvisionerKind, String> {
    match s {
        "venv" => Ok(ProvisionerKind::Venv),
        "base" => Ok(ProvisionerKind::Base),
        _ => Err("expected venv or base".into()),
    }
}

/// A failure that maps to a specific exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Interrupted { offset: usize },
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(msg) => f.write_str(msg),
            Failure::Interrupted { offset } => write!(f, "interrupted; resume with --resume (next query offset {offset})"),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Failure>() {
        Some(Failure::Config(_)) => 2,
        Some(Failure::Interrupted { .. }) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(args),
        Command::Inspect { library, json } => commands::cmd_inspect(&library, json),
        Command::ValidateTool(a) => {
            commands::cmd_validate_tool(&a.source, a.name.as_deref(), a.input.as_deref(), a.harness, a.python, a.timeout_secs)
        }
        Command::Replay { trace, json } => commands::cmd_replay(&trace, json),
        Command::Export { trace, out_dir, egl_window } => commands::cmd_export(&trace, &out_dir, egl_window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
