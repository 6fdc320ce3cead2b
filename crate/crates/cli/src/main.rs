//! `keepalive` command-line frontend.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Slice;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Usage = 1,
    Data = 2,
    Diverged = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(error: impl Into<anyhow::Error>) -> CliError {
    CliError { kind: Failure::Usage, error: error.into() }
}

pub fn data(error: impl Into<anyhow::Error>) -> CliError {
    CliError { kind: Failure::Data, error: error.into() }
}

#[derive(Parser, Debug)]
#[command(name = "keepalive", version, about = "Latency/carbon-aware keep-alive simulation and training")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output.dir`.
    #[arg(long, global = true, env = "KEEPALIVE_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for compare and sweep.
    #[arg(long, global = true, env = "KEEPALIVE_THREADS")]
    pub threads: Option<usize>,
    /// Overrides `output.verbosity`.
    #[arg(long, global = true)]
    pub verbosity: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic trace CSV.
    GenTrace(GenTraceArgs),
    /// Replay the trace under one policy.
    Simulate(SimulateArgs),
    /// Train the DQN agent.
    Train(TrainArgs),
    /// Run several policies on the same trace slice.
    Compare(CompareArgs),
    /// Sweep the preference weight.
    Sweep(SweepArgs),
    /// RL against Oracle on the same slice.
    OracleGap(OracleGapArgs),
    /// Print a commented example configuration.
    ExampleConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Poisson,
    Bimodal,
    Deterministic,
}

#[derive(Args, Debug)]
pub struct GenTraceArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Trace length in seconds.
    #[arg(long)]
    pub duration: u64,
    /// Spacing of the deterministic model, seconds.
    #[arg(long)]
    pub interval: Option<f64>,
    /// Poisson rate, Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub burst_rate: Option<f64>,
    #[arg(long)]
    pub lull_rate: Option<f64>,
    /// Length of each bimodal phase, seconds.
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub functions: usize,
    /// Pods per function.
    #[arg(long, default_value_t = 1)]
    pub pods: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the generating cold-start table as a cold-start log.
    #[arg(long)]
    pub cold_log: Option<PathBuf>,
}

/// Flags shared by the simulation commands; each overrides its config key.
#[derive(Args, Debug, Default)]
pub struct SimOverrides {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub slice: Option<Slice>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub policy: Option<String>,
    /// Timeout of the fixed policy, seconds.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also write the per-invocation outcome CSV.
    #[arg(long)]
    pub outcomes: bool,
    /// Also write the per-hour decision/intensity profile CSV.
    #[arg(long)]
    pub profile: bool,
    #[command(flatten)]
    pub sim: SimOverrides,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    #[command(flatten)]
    pub sim: SimOverrides,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Comma-separated policy names; `fixed:K` picks the fixed timeout.
    #[arg(long, value_delimiter = ',', required = true)]
    pub policies: Vec<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub sim: SimOverrides,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub lambda_grid: Vec<f64>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub k: Option<f64>,
    /// Model for `rl`; without one an agent is trained per grid point.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub slice: Option<Slice>,
}

#[derive(Args, Debug)]
pub struct OracleGapArgs {
    /// Trained model; without one an agent is trained first.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub sim: SimOverrides,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Failure::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind as u8)
        }
    }
}
