//! `agileir`: train, evaluate, run and analyse grouped shifted-window
//! attention super-resolution models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "agileir", version, about = "Lightweight window-attention super-resolution", propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a metrics log.
    Train(TrainArgs),
    /// Score a checkpoint (or bicubic / the HR reference) on a folder of HR PNGs.
    Eval(EvalArgs),
    /// Super-resolve one PNG.
    Infer(InferArgs),
    /// Compare analytic backward passes with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Analytic training-memory comparison of two model configurations.
    Memreport(MemreportArgs),
    /// Parameter counts (and optionally short-run PSNR) across query/key widths.
    Qksweep(QksweepArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Sectioned TOML config (see configs/default.toml). Defaults apply without one.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set model.preset=agileir_plus`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for initialisation and data sampling. Wins over the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    /// The checkpoint given with --checkpoint.
    Model,
    /// Bicubic upsampling of the LR input.
    Bicubic,
    /// The HR image itself (sanity ceiling).
    Reference,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score; required for `--method model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Folder of HR PNGs; LR inputs come from `LR_x{scale}/` inside it when present.
    #[arg(long)]
    pub data: PathBuf,
    /// Upscaling factor: 2 or 4.
    #[arg(long)]
    pub scale: usize,
    #[arg(long, value_enum, default_value = "model")]
    pub method: MethodArg,
    /// Report file [default: eval_x{scale}_{method}.txt].
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input PNG.
    #[arg(long)]
    pub input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub output: PathBuf,
    /// Expected scale; must match the checkpoint when given.
    #[arg(long)]
    pub scale: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Op,
    Layer,
    Model,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Run only the targets of one scope.
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
    /// Run only the named targets. Repeatable.
    #[arg(long)]
    pub only: Vec<String>,
    /// Flip the sign of one op's backward rule (harness self-test).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    /// Seed for the random inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct MemreportArgs {
    /// Baseline preset.
    #[arg(long, default_value = "swinir_light_ref")]
    pub a: String,
    /// Preset compared against the baseline.
    #[arg(long, default_value = "agileir")]
    pub b: String,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// LR patch height.
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// LR patch width.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Emit `key=value` records instead of tables.
    #[arg(long)]
    pub machine: bool,
    /// Also print the per-layer table of each configuration.
    #[arg(long)]
    pub layers: bool,
    /// Also run one real training step of `--b` and report the engine's peak.
    #[arg(long)]
    pub measure: bool,
    /// Refuse to measure when the estimate exceeds this many MiB.
    #[arg(long, default_value_t = 2048)]
    pub limit_mib: usize,
}

#[derive(Args)]
pub struct QksweepArgs {
    /// Preset the variants derive from.
    #[arg(long, default_value = "agileir")]
    pub preset: String,
    /// Number of attention groups [default: the preset's].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Per-group query/key widths.
    #[arg(long, value_delimiter = ',', conflicts_with = "total_qk", required_unless_present = "total_qk")]
    pub dk: Vec<usize>,
    /// Total query/key widths; each must divide evenly into the groups.
    #[arg(long, value_delimiter = ',')]
    pub total_qk: Vec<usize>,
    /// Folder of HR PNGs to score on after training.
    #[arg(long)]
    pub eval_dir: Option<PathBuf>,
    /// Training images [default: --eval-dir].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training steps per variant; 0 only counts parameters.
    #[arg(long, default_value_t = 0)]
    pub iters: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// LR patch side.
    #[arg(long, default_value_t = 48)]
    pub patch: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of one command, carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<agileir::Error> for CliError {
    fn from(e: agileir::Error) -> Self {
        match e {
            agileir::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Memreport(a) => commands::memreport(a),
        Command::Qksweep(a) => commands::qksweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
