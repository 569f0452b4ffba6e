use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use seqrank::aggregate::AggregatorConfig;
use seqrank::derandomize::MergeMethod;
use seqrank::engine::{Method, ModelConfig};
use seqrank::session::TiePolicy;

#[derive(Debug, Parser)]
#[command(name = "seqrank", version, about = "Rank-based anytime-valid sequential independence test")]
pub struct Cli {
    /// Worker threads for simulate/calibrate/baseline-sr (default: all cores).
    #[arg(long, global = true, env = "SEQRANK_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the sequential test on a stream of (x, y) pairs.
    Test(TestArgs),
    /// Power and stopping-time experiments on synthetic scenarios.
    Simulate(SimulateArgs),
    /// Monte Carlo thresholds for truncated tests.
    Calibrate(CalibrateArgs),
    /// Paired betting baseline on synthetic scenarios.
    BaselineSr(BaselineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Grid,
    Seqbet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MergeArg {
    Arithmetic,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdArg {
    Ville,
    Fixed(f64),
    /// Calibrated for this horizon; `None` means the run's budget.
    Auto(Option<u64>),
}

pub fn parse_threshold(s: &str) -> Result<ThresholdArg, String> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("ville") {
        return Ok(ThresholdArg::Ville);
    }
    if s.eq_ignore_ascii_case("auto") {
        return Ok(ThresholdArg::Auto(None));
    }
    if let Some(n) = s.strip_prefix("auto:") {
        return n
            .parse::<u64>()
            .ok()
            .filter(|&n| n > 0)
            .map(|n| ThresholdArg::Auto(Some(n)))
            .ok_or_else(|| format!("invalid horizon in '{s}'"));
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 1.0 && v.is_finite() => Ok(ThresholdArg::Fixed(v)),
        _ => Err(format!("expected 'ville', 'auto', 'auto:N' or a number ≥ 1, got '{s}'")),
    }
}

pub fn parse_ties(s: &str) -> Result<TiePolicy, String> {
    match s.trim() {
        "error" => Ok(TiePolicy::Error),
        "randomized" | "single" => Ok(TiePolicy::SingleRandomized),
        other => other
            .strip_prefix("paths:")
            .and_then(|b| b.parse::<usize>().ok())
            .filter(|&b| b > 0)
            .map(|paths| TiePolicy::RandomizedPaths { paths })
            .ok_or_else(|| format!("expected 'error', 'randomized' or 'paths:B', got '{other}'")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    #[arg(long, value_enum, default_value_t = MethodArg::Grid)]
    pub method: MethodArg,

    /// Grid depths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 8, 16])]
    pub depths: Vec<usize>,

    /// Inverse temperature of the depth mixture.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,

    /// Constant part of the depth mixture (default 0.2 for eta = 0, else 0).
    #[arg(long)]
    pub w0: Option<f64>,

    /// Pseudo-count per cell.
    #[arg(long, default_value_t = 1.0)]
    pub c0: f64,

    /// Observations before a depth starts betting (default: the depth).
    #[arg(long)]
    pub activation: Option<u64>,

    /// Binary digits of the interaction test.
    #[arg(long, default_value_t = 4)]
    pub bet_bits: u32,

    /// Disable the uniform-margin correction.
    #[arg(long)]
    pub no_sinkhorn: bool,

    /// Use randomized ranks instead of their conditional expectation.
    #[arg(long)]
    pub randomized: bool,

    /// Tie handling: error, randomized, or paths:B (the last two imply --randomized).
    #[arg(long, value_parser = parse_ties, default_value = "error")]
    pub ties: TiePolicy,

    /// P-value merge across randomized paths.
    #[arg(long, value_enum, default_value_t = MergeArg::Arithmetic)]
    pub merge: MergeArg,

    /// Master seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ModelArgs {
    pub fn model(&self) -> ModelConfig {
        let mut aggregation = AggregatorConfig::default_for_eta(self.eta);
        let k = self.depths.len().max(1);
        aggregation.depths = self.depths.clone();
        aggregation.weights = vec![1.0 / k as f64; self.depths.len()];
        if let Some(w0) = self.w0 {
            aggregation.w0 = w0;
        }
        ModelConfig {
            method: match self.method {
                MethodArg::Grid => Method::Grid,
                MethodArg::Seqbet => Method::Seqbet,
            },
            aggregation,
            sinkhorn: !self.no_sinkhorn,
            derandomize: !self.randomized && self.ties == TiePolicy::Error,
            c0: self.c0,
            activation: self.activation,
            bet_bits: self.bet_bits,
            ..ModelConfig::default()
        }
    }

    pub fn merge(&self) -> MergeMethod {
        match self.merge {
            MergeArg::Arithmetic => MergeMethod::Arithmetic,
            MergeArg::Geometric => MergeMethod::Geometric,
        }
    }
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// CSV file with two numeric columns and an optional header; '-' or absent reads stdin.
    #[arg(long, conflicts_with = "scenario")]
    pub input: Option<PathBuf>,

    /// Generate the stream from a synthetic scenario instead of reading input.
    #[arg(long)]
    pub scenario: Option<String>,

    /// Noise level of the synthetic scenario.
    #[arg(long, default_value_t = 1)]
    pub noise: u32,

    /// Rejection threshold: ville (1/alpha), a number, or auto:N for a calibrated truncated test.
    #[arg(long, value_parser = parse_threshold, default_value = "ville")]
    pub threshold: ThresholdArg,

    /// Calibration tables to search for auto thresholds (default: the bundled ones).
    #[arg(long)]
    pub calibration: Option<PathBuf>,

    /// Stop after this many observations.
    #[arg(long)]
    pub max_n: Option<u64>,

    /// Per-step records; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,

    /// Emit every k-th record (the last record is always emitted).
    #[arg(long, default_value_t = 1)]
    pub every: u64,

    /// Continue from a saved session state instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Save the session state here when the run ends.
    #[arg(long)]
    pub save_state: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExperimentArgs {
    /// Scenario names, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub scenario: Vec<String>,

    /// Noise levels, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1u32])]
    pub noise: Vec<u32>,

    #[arg(long, default_value_t = 1000)]
    pub reps: usize,

    /// Sample budget per replication.
    #[arg(long, default_value_t = 512)]
    pub max_n: u64,

    /// One row per replication.
    #[arg(long)]
    pub runs: Option<PathBuf>,

    /// Rejection rate against sample size.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    #[command(flatten)]
    pub experiment: ExperimentArgs,

    /// Rejection threshold; auto uses the calibrated value for the budget.
    #[arg(long, value_parser = parse_threshold, default_value = "auto")]
    pub threshold: ThresholdArg,

    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,

    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,

    /// Rejection threshold: ville (1/alpha) or a number.
    #[arg(long, value_parser = parse_threshold, default_value = "ville")]
    pub threshold: ThresholdArg,

    /// Witness grid spacing on the rank scale.
    #[arg(long, default_value_t = 0.025)]
    pub grid_step: f64,

    #[arg(long, default_value_t = 0.5)]
    pub lambda_max: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Levels to tabulate, comma separated (overrides --alpha).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,

    /// Strictly increasing horizons, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub horizons: Vec<u64>,

    #[arg(long, default_value_t = 20_000)]
    pub reps: usize,

    /// JSON array of tables; stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}
