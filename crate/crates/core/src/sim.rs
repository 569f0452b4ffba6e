//! Synthetic dependence scenarios and power experiments.
//!
//! With `σ = l/40` and `ε, ε′, ε″ ~ N(0, σ²)`:
//!
//! | scenario     | X                 | Y                                              |
//! |--------------|-------------------|------------------------------------------------|
//! | checkerboard | `W + ε`           | `1{W=2}(V₁ + 4ε′) + 1{W≠2}(V₂ + 4ε″)`           |
//! | circular     | `cos θ + 2.5ε`    | `sin θ + 2.5ε′`                                |
//! | linear       | `U`               | `X + 6ε`                                       |
//! | local        | `G₁`              | `1{G₁,G₂∈[0,1]}(X + ε) + (1 − 1{…})G₂`          |
//! | parabolic    | `U`               | `(X − 0.5)² + 1.5ε`                            |
//! | sine         | `U`               | `sin(4πX) + 8ε`                                |
//! | independent  | `U`               | `U′`                                           |
//!
//! where `U, U′ ~ U[0,1]`, `θ ~ U[−π, π]`, `W ~ U{1,2,3}`, `V₁ ~ U{2,4}`,
//! `V₂ ~ U{1,3,5}` and `G₁, G₂ ~ N(0, 1/4)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{SrConfig, SrState};
use crate::error::{Error, Result};
use crate::grid::bin_index;
use crate::session::{Decision, Session, SessionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Independent,
    Checkerboard,
    Circular,
    Linear,
    Local,
    Parabolic,
    Sine,
}

impl Scenario {
    pub const ALL: [Scenario; 7] = [
        Scenario::Independent,
        Scenario::Checkerboard,
        Scenario::Circular,
        Scenario::Linear,
        Scenario::Local,
        Scenario::Parabolic,
        Scenario::Sine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Independent => "independent",
            Scenario::Checkerboard => "checkerboard",
            Scenario::Circular => "circular",
            Scenario::Linear => "linear",
            Scenario::Local => "local",
            Scenario::Parabolic => "parabolic",
            Scenario::Sine => "sine",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Noise level `l` in `1..=10`.
    pub noise: u32,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, noise: u32, seed: u64) -> Result<Self> {
        if !(1..=10).contains(&noise) {
            return Err(Error::InvalidInput(format!("noise level must be in 1..=10, got {noise}")));
        }
        Ok(Self {
            scenario,
            noise,
            seed,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.noise as f64 / 40.0
    }

    /// Stream of replication `rep`.
    pub fn generator(&self, rep: u64) -> Generator {
        Generator::with_sigma(self.scenario, self.sigma(), self.seed, rep)
    }
}

/// Infinite iid stream of `(x, y)` pairs.
#[derive(Debug, Clone)]
pub struct Generator {
    scenario: Scenario,
    sigma: f64,
    rng: ChaCha8Rng,
}

impl Generator {
    /// Generator with an arbitrary noise scale, e.g. `0` for the noise-free limit.
    pub fn with_sigma(scenario: Scenario, sigma: f64, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            scenario,
            sigma,
            rng,
        }
    }

    fn eps(&mut self) -> f64 {
        self.sigma * self.rng.sample::<f64, _>(StandardNormal)
    }

    pub fn sample(&mut self) -> (f64, f64) {
        match self.scenario {
            Scenario::Independent => (self.rng.random(), self.rng.random()),
            Scenario::Checkerboard => {
                let w = self.rng.random_range(1..=3) as f64;
                let x = w + self.eps();
                let y = if w == 2.0 {
                    let v1 = [2.0, 4.0][self.rng.random_range(0..2)];
                    v1 + 4.0 * self.eps()
                } else {
                    let v2 = [1.0, 3.0, 5.0][self.rng.random_range(0..3)];
                    v2 + 4.0 * self.eps()
                };
                (x, y)
            }
            Scenario::Circular => {
                let theta = self.rng.random_range(-PI..PI);
                let x = theta.cos() + 2.5 * self.eps();
                let y = theta.sin() + 2.5 * self.eps();
                (x, y)
            }
            Scenario::Linear => {
                let x: f64 = self.rng.random();
                (x, x + 6.0 * self.eps())
            }
            Scenario::Local => {
                let g1 = 0.5 * self.rng.sample::<f64, _>(StandardNormal);
                let g2 = 0.5 * self.rng.sample::<f64, _>(StandardNormal);
                let e = self.eps();
                let inside = (0.0..=1.0).contains(&g1) && (0.0..=1.0).contains(&g2);
                (g1, if inside { g1 + e } else { g2 })
            }
            Scenario::Parabolic => {
                let x: f64 = self.rng.random();
                (x, (x - 0.5).powi(2) + 1.5 * self.eps())
            }
            Scenario::Sine => {
                let x: f64 = self.rng.random();
                (x, (4.0 * PI * x).sin() + 8.0 * self.eps())
            }
        }
    }
}

impl Iterator for Generator {
    type Item = (f64, f64);

    fn next(&mut self) -> Option<(f64, f64)> {
        Some(self.sample())
    }
}

/// Result of one truncated sequential test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub rejected: bool,
    /// Sample size at rejection, or the budget.
    pub stop: u64,
    pub final_log10: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub method: String,
    pub scenario: Scenario,
    pub noise: u32,
    pub reps: usize,
    pub budget: u64,
    pub threshold: f64,
    pub rejection_rate: f64,
    /// Mean stopping time over rejecting paths only.
    pub mean_stop_rejecting: Option<f64>,
    pub median_stop_rejecting: Option<f64>,
    /// Mean stopping time with the budget imputed for non-rejecting paths.
    pub mean_stop_imputed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub runs: Vec<Replication>,
}

impl ExperimentResult {
    fn from_runs(method: &str, spec: &ScenarioSpec, budget: u64, threshold: f64, runs: Vec<Replication>) -> Self {
        let reps = runs.len();
        let mut stops: Vec<u64> = runs.iter().filter(|r| r.rejected).map(|r| r.stop).collect();
        stops.sort_unstable();
        let mean = |v: &[u64]| v.iter().sum::<u64>() as f64 / v.len() as f64;
        let median = |v: &[u64]| {
            let m = v.len() / 2;
            if v.len() % 2 == 1 {
                v[m] as f64
            } else {
                0.5 * (v[m - 1] + v[m]) as f64
            }
        };
        let all: Vec<u64> = runs.iter().map(|r| r.stop).collect();
        let summary = ExperimentSummary {
            method: method.to_string(),
            scenario: spec.scenario,
            noise: spec.noise,
            reps,
            budget,
            threshold,
            rejection_rate: stops.len() as f64 / reps.max(1) as f64,
            mean_stop_rejecting: (!stops.is_empty()).then(|| mean(&stops)),
            median_stop_rejecting: (!stops.is_empty()).then(|| median(&stops)),
            mean_stop_imputed: if all.is_empty() { 0.0 } else { mean(&all) },
        };
        Self { summary, runs }
    }

    /// `P(τ ≤ N)` at each requested sample size.
    pub fn rejection_curve(&self, sizes: &[u64]) -> Vec<(u64, f64)> {
        let reps = self.runs.len().max(1) as f64;
        sizes
            .iter()
            .map(|&n| {
                let hits = self.runs.iter().filter(|r| r.rejected && r.stop <= n).count();
                (n, hits as f64 / reps)
            })
            .collect()
    }
}

/// Derives an independent per-replication seed.
pub fn replication_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one session per replication on fresh scenario data, truncated at `budget`.
pub fn run_experiment(
    spec: &ScenarioSpec,
    config: &SessionConfig,
    reps: usize,
    budget: u64,
) -> Result<ExperimentResult> {
    if reps == 0 || budget == 0 {
        return Err(Error::InvalidInput("need at least one replication and a positive budget".into()));
    }
    let base = SessionConfig {
        max_n: Some(budget),
        ..config.clone()
    };
    let probe = Session::new(base.clone())?;
    let threshold = probe.threshold();
    let runs = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut session = Session::new(SessionConfig {
                seed: replication_seed(config.seed, rep as u64),
                ..base.clone()
            })?;
            let mut last = None;
            for (x, y) in spec.generator(rep as u64) {
                let report = session.observe(x, y)?;
                let stop = report.decision != Decision::Continue;
                last = Some(report);
                if stop {
                    break;
                }
            }
            let last = last.expect("budget is positive");
            Ok(Replication {
                rep,
                rejected: last.decision == Decision::Reject,
                stop: last.n,
                final_log10: last.aggregate_log10,
                p_value: last.p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult::from_runs("seqrank", spec, budget, threshold, runs))
}

/// Same experiment for the paired betting baseline, rejecting at `threshold`.
pub fn run_baseline_experiment(
    spec: &ScenarioSpec,
    config: &SrConfig,
    threshold: f64,
    reps: usize,
    budget: u64,
) -> Result<ExperimentResult> {
    if reps == 0 || budget == 0 {
        return Err(Error::InvalidInput("need at least one replication and a positive budget".into()));
    }
    if !(threshold >= 1.0) {
        return Err(Error::Config(format!("threshold must be at least 1, got {threshold}")));
    }
    SrState::new(*config)?;
    let level = threshold.ln();
    let runs = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut state = SrState::new(*config)?;
            let mut max_log = 0.0f64;
            let mut stop = budget;
            let mut rejected = false;
            for (n, (x, y)) in (1..=budget).zip(spec.generator(rep as u64)) {
                state.observe(x, y)?;
                max_log = max_log.max(state.log_m());
                if state.log_m() >= level {
                    rejected = true;
                    stop = n;
                    break;
                }
            }
            Ok(Replication {
                rep,
                rejected,
                stop,
                final_log10: state.log_m() / std::f64::consts::LN_10,
                p_value: (-max_log).exp().min(1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult::from_runs("sr", spec, budget, threshold, runs))
}

/// Plug-in `Σ q̂ log(q̂ d²)` of the binned sample against the uniform grid.
pub fn kl_grid_estimate(samples: &[(f64, f64)], d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidDepth("depth must be positive".into()));
    }
    if samples.len() < d * d {
        return Err(Error::TooFewSamples(format!(
            "{} samples for {} cells",
            samples.len(),
            d * d
        )));
    }
    let mut counts = vec![0u64; d * d];
    for &(r, s) in samples {
        counts[bin_index(r, s, d)?.flat(d)] += 1;
    }
    let n = samples.len() as f64;
    let cells = (d * d) as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            q * (q * cells).ln()
        })
        .sum::<f64>()
        .max(0.0))
}
