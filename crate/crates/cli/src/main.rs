mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use empflow::Error;
use serde::Serialize;

/// Large deviations of empirical measure and flow for continuous-time Markov chains.
#[derive(Debug, Parser, Serialize)]
#[command(name = "empflow", version, about)]
struct Cli {
    /// Worker threads for trajectory batches (default: $EMPFLOW_THREADS, else all cores).
    /// Results do not depend on this value.
    #[arg(long, global = true, env = "EMPFLOW_THREADS")]
    #[serde(skip)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Sample trajectories; one path is written out in full, a batch as mean statistics.
    Simulate(SimulateArgs),
    /// Evaluate the rate function at a (measure, flow) pair.
    Rate(RateArgs),
    /// Decompose a divergence-free flow into cycles.
    Decompose(DecomposeArgs),
    /// Importance-sampling estimates of P((mu_T, Q_T) in event).
    #[command(alias = "estimate")]
    TiltEstimate(TiltArgs),
    /// Numeric checks of the compactness conditions on a truncated model.
    Check(CheckArgs),
    /// Birth–death counterexamples.
    Counterexample(CounterexampleArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Debug, Args, Serialize)]
struct Output {
    /// Write to this file instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// JSON output.
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    /// CSV output.
    #[arg(long)]
    csv: bool,
}

impl Output {
    fn format(&self, default: Format) -> Format {
        if self.json {
            Format::Json
        } else if self.csv {
            Format::Csv
        } else {
            default
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Initial state label (default: the first state).
    #[arg(long)]
    x0: Option<String>,
    #[arg(long = "horizon", short = 'T')]
    horizon: f64,
    #[arg(long, default_value_t = 1)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args, Serialize)]
struct RateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Measure JSON; with --stationary, omitted in favour of the invariant law.
    #[arg(long, required_unless_present = "stationary")]
    measure: Option<PathBuf>,
    /// Flow JSON.
    #[arg(long, required_unless_present = "stationary")]
    flow: Option<PathBuf>,
    /// Evaluate at the invariant pair (pi, Q^pi).
    #[arg(long)]
    stationary: bool,
    /// Number of largest edge terms to list.
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args, Serialize)]
struct DecomposeArgs {
    /// Flow JSON.
    #[arg(long)]
    flow: PathBuf,
    /// Model giving the state labels (default: labels in order of appearance in the flow).
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args, Serialize)]
struct TiltArgs {
    #[arg(long)]
    model: PathBuf,
    /// Conjunction of linear constraints, e.g. "mu[0] >= 0.7 && Q[0,1] <= 2".
    #[arg(long)]
    event: String,
    #[arg(long)]
    x0: Option<String>,
    /// Horizons, comma separated.
    #[arg(long = "T-list", alias = "t-list", value_delimiter = ',', required = true)]
    t_list: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `auto` to search the tilt, or a JSON file {"measure": ..., "flow": ...}.
    #[arg(long, default_value = "auto")]
    tilt: String,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Condition {
    Lyapunov,
    Logsobolev,
    Moments,
}

#[derive(Debug, Args, Serialize)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    condition: Condition,
    /// Lyapunov function: `geometric:A` for u(k) = A^k, `const` for u = 1, or a
    /// JSON file {"weights": [[label, u], ...]}.
    #[arg(long, default_value = "geometric:2")]
    u: String,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Kind {
    StrongTopology,
    NonTightness,
}

#[derive(Debug, Args, Serialize)]
struct CounterexampleArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Largest n in the strong-topology sweep.
    #[arg(long, default_value_t = 30)]
    n_max: usize,
    /// States kept past n + 1 in each truncation.
    #[arg(long, default_value_t = 40)]
    extra_states: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    delta: f64,
    #[arg(long = "horizon", short = 'T', default_value_t = 3.0)]
    horizon: f64,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    output: Output,
}

/// Process exit status for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::InvalidArgument(_) | Error::Io(_) | Error::EmptyTruncation => 2,
        Error::InvalidModel(_)
        | Error::UnknownState(_)
        | Error::UnknownEdge(..)
        | Error::NoUniqueInvariant
        | Error::NonzeroDivergence { .. }
        | Error::UnsupportedFlow(..)
        | Error::DisconnectedAmbient { .. } => 3,
        Error::NumericalFailure(_) | Error::InfiniteRate | Error::DegenerateTilt | Error::AbsorbedBeforeHorizon { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
