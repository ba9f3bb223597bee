//! `brat` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use brat::infer::IntervalKind;
use brat::kernel::SketchMethod;
use brat::{Algo, BratError, SplitRule};
use clap::{Args, Parser, Subcommand};

/// Boosted regression trees with confidence, prediction and reproduction
/// intervals.
///
/// Every command reads an optional JSON run configuration; flags override
/// its fields. Outputs go to fixed file names under --out.
///
/// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "brat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes model.json and train_log.csv.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Predict with a trained model; writes predictions.csv.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Intervals at test points, widths calibrated on a calibration set;
    /// writes intervals.csv.
    Intervals {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        intervals: IntervalArgs,
        #[command(flatten)]
        sketch: SketchArgs,
    },
    /// Chi-squared test for the importance of dropped features; writes
    /// importance.json.
    Importance {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Feature columns to drop from the reduced model (names or 0-based
        /// indices, comma separated).
        #[arg(long, value_delimiter = ',')]
        drop: Option<Vec<String>>,
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        sketch: SketchArgs,
    },
    /// Run a simulation scenario; writes its CSV tables and summary.json.
    Sim {
        #[command(flatten)]
        common: CommonArgs,
        /// fixed-point, normality, coverage, vi-power, signal-recovery or mse-race.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Training set size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model file (default: <out>/model.json).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ParamArgs {
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dropout_p: Option<f64>,
    #[arg(long)]
    subsample_xi: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Trees per round (brat_p).
    #[arg(long)]
    trees_per_round: Option<usize>,
    /// Truncation level, "auto" or "off".
    #[arg(long)]
    truncation: Option<String>,
    /// Round after which structures are frozen, or "off".
    #[arg(long)]
    freeze_after: Option<String>,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Minimum leaf size or "auto".
    #[arg(long)]
    min_leaf: Option<String>,
    #[arg(long, value_parser = parse_split_rule)]
    split_rule: Option<SplitRule>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Response column name (default "y").
    #[arg(long)]
    target: Option<String>,
    /// Min-max scale features using the training set.
    #[arg(long)]
    scale: bool,
}

#[derive(Args, Debug, Default)]
struct IntervalArgs {
    /// Interval kinds, comma separated: ci, pi, ri.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    kinds: Option<Vec<IntervalKind>>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Keep the nominal prediction-interval width.
    #[arg(long)]
    no_calibrate: bool,
}

#[derive(Args, Debug, Default)]
struct SketchArgs {
    /// Use a Nyström sketch with this many landmarks.
    #[arg(long)]
    sketch_s: Option<usize>,
    /// Holdout points used by the sketched importance test.
    #[arg(long)]
    sketch_r: Option<usize>,
    #[arg(long, value_parser = parse_method)]
    sketch_method: Option<SketchMethod>,
    #[arg(long)]
    sketch_seed: Option<u64>,
}

fn parse_split_rule(s: &str) -> Result<SplitRule, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> Result<IntervalKind, String> {
    s.parse().map_err(|e: BratError| e.to_string())
}

fn parse_method(s: &str) -> Result<SketchMethod, String> {
    s.parse().map_err(|e: BratError| e.to_string())
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Brat(BratError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Brat(e) => e.fmt(f),
        }
    }
}

impl From<BratError> for CliError {
    fn from(e: BratError) -> Self {
        CliError::Brat(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Brat(BratError::InvalidParam { .. }) => 2,
            CliError::Brat(BratError::Numerical(_)) => 4,
            CliError::Brat(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
