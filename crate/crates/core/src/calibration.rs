//! Monte Carlo thresholds for truncated tests.
//!
//! Under independence with continuous marginals the sequential ranks of both
//! coordinates are independent and uniform on `{1, …, n}`, so null paths can
//! be simulated without generating data. For a horizon `N` the threshold
//! `L_{α,N}` is the `⌈(1−α)·reps⌉`-th order statistic of `max_{n≤N} M_n`
//! over simulated paths; all horizons share the same paths.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ModelConfig, PathEngine};
use crate::error::{Error, Result};
use crate::rank::RankPair;
use crate::rng::CounterRng;

pub const TABLE_VERSION: u32 = 1;

/// Below this many replications a table carries a warning.
pub const MIN_RECOMMENDED_REPS: usize = 1000;

/// p-values at which the empirical CDF of `p_N` is tabulated.
pub const CDF_GRID: [f64; 14] = [
    0.001, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.1, 0.2, 0.3, 0.5, 1.0,
];

/// Stable hash of everything that affects the null law of the e-process.
pub fn fingerprint(model: &ModelConfig) -> String {
    let canonical = serde_json::to_string(model).expect("model config is serializable");
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// A synthetic null path fed with sequential ranks instead of data.
///
/// Until every component has activated, stand-in values are kept whose order
/// reproduces the drawn ranks, so the batch-rank seeding sees the same
/// pattern as it would on real data.
#[derive(Debug, Clone)]
pub struct NullPath {
    engine: PathEngine,
    randomized: bool,
    tracked: u64,
    xs: Vec<f64>,
    ys: Vec<f64>,
    n: u64,
}

fn stand_in(sorted: &mut Vec<f64>, below: usize) -> f64 {
    let v = match (below.checked_sub(1).map(|i| sorted[i]), sorted.get(below)) {
        (None, None) => 0.0,
        (None, Some(&hi)) => hi - 1.0,
        (Some(lo), None) => lo + 1.0,
        (Some(lo), Some(&hi)) => 0.5 * (lo + hi),
    };
    sorted.insert(below, v);
    v
}

impl NullPath {
    pub fn new(model: &ModelConfig) -> Result<Self> {
        Ok(Self {
            engine: PathEngine::new(model)?,
            randomized: !model.derandomize,
            tracked: model.max_activation(),
            xs: Vec::new(),
            ys: Vec::new(),
            n: 0,
        })
    }

    pub fn engine(&self) -> &PathEngine {
        &self.engine
    }

    /// Advances with the sequential rank counts `cx, cy ∈ 1..=n`.
    pub fn push_ranks(&mut self, cx: u64, cy: u64, randomizers: Option<(f64, f64)>) -> Result<f64> {
        self.n += 1;
        let n = self.n;
        if !(1..=n).contains(&cx) || !(1..=n).contains(&cy) {
            return Err(Error::InvalidInput(format!("ranks ({cx}, {cy}) outside 1..={n}")));
        }
        let seed_point = if n <= self.tracked {
            (
                stand_in(&mut self.xs, cx as usize - 1),
                stand_in(&mut self.ys, cy as usize - 1),
            )
        } else {
            (0.0, 0.0)
        };
        let px = RankPair {
            at_or_below: cx,
            below: cx - 1,
            n,
        };
        let py = RankPair {
            at_or_below: cy,
            below: cy - 1,
            n,
        };
        self.engine.step(&px, &py, seed_point, randomizers)?;
        Ok(self.engine.log_m())
    }

    /// Advances with ranks (and randomizers) drawn from `rng`.
    pub fn step_random(&mut self, rng: &mut CounterRng) -> Result<f64> {
        let n = self.n + 1;
        let cx = rng.rank(n);
        let cy = rng.rank(n);
        let uv = self.randomized.then(|| (rng.uniform_open(), rng.uniform_open()));
        self.push_ranks(cx, cy, uv)
    }
}

/// Natural-log running maxima of one null path at each of the sorted
/// `horizons`, using stream `stream` of `seed`.
pub fn null_running_max_logs(model: &ModelConfig, horizons: &[u64], seed: u64, stream: u64) -> Result<Vec<f64>> {
    let mut path = NullPath::new(model)?;
    let mut rng = CounterRng::new(seed, stream);
    let mut out = Vec::with_capacity(horizons.len());
    let mut max_log = 0.0f64;
    let mut n = 0u64;
    for &h in horizons {
        while n < h {
            max_log = max_log.max(path.step_random(&mut rng)?);
            n += 1;
        }
        out.push(max_log);
    }
    Ok(out)
}

/// `max_{n≤N} M_n` on one synthetic null path (1 for `N = 0`).
pub fn simulate_null_running_max(model: &ModelConfig, horizon: u64, seed: u64) -> Result<f64> {
    Ok(null_running_max_logs(model, &[horizon], seed, 0)?[0].exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub p: f64,
    /// Fraction of paths with `p_N ≤ p`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub horizon: u64,
    /// Estimated `L_{α,N}`, capped at `1/α`.
    pub threshold: f64,
    /// Fraction of paths reaching `1/α` by the horizon.
    pub ville_crossing: f64,
    pub p_cdf: Vec<CdfPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub version: u32,
    pub fingerprint: String,
    pub model: ModelConfig,
    pub alpha: f64,
    pub reps: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationTable {
    pub fn threshold_for(&self, horizon: u64) -> Option<f64> {
        self.entries.iter().find(|e| e.horizon == horizon).map(|e| e.threshold)
    }

    pub fn matches(&self, model: &ModelConfig, alpha: f64) -> bool {
        self.fingerprint == fingerprint(model) && (self.alpha - alpha).abs() < 1e-12
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("calibration table: {e}")))?;
        if table.version != TABLE_VERSION {
            return Err(Error::InvalidInput(format!(
                "calibration table version {} (expected {TABLE_VERSION})",
                table.version
            )));
        }
        Ok(table)
    }
}

/// Running-maximum logs of `reps` null paths (rows) at each horizon (columns).
pub fn simulate_null_maxima(
    model: &ModelConfig,
    horizons: &[u64],
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut sorted = horizons.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted != horizons {
        return Err(Error::InvalidInput("horizons must be strictly increasing".into()));
    }
    PathEngine::new(model)?;
    (0..reps)
        .into_par_iter()
        .map(|rep| null_running_max_logs(model, horizons, seed, rep as u64))
        .collect()
}

/// Index of the `⌈q·len⌉`-th order statistic.
fn upper_order_index(q: f64, len: usize) -> usize {
    ((q * len as f64).ceil() as usize).clamp(1, len) - 1
}

fn table_from_maxima(
    model: &ModelConfig,
    alpha: f64,
    horizons: &[u64],
    maxima: &[Vec<f64>],
    seed: u64,
) -> CalibrationTable {
    let reps = maxima.len();
    let ville = (1.0 / alpha).ln();
    let entries = horizons
        .iter()
        .enumerate()
        .map(|(j, &horizon)| {
            let mut col: Vec<f64> = maxima.iter().map(|row| row[j]).collect();
            col.sort_by(f64::total_cmp);
            let quantile = col[upper_order_index(1.0 - alpha, reps)];
            let threshold = quantile.exp().clamp(1.0, 1.0 / alpha);
            let at_least = |level: f64| col.len() - col.partition_point(|&m| m < level);
            let p_cdf = CDF_GRID
                .iter()
                .map(|&p| CdfPoint {
                    p,
                    fraction: at_least(-p.ln()) as f64 / reps as f64,
                })
                .collect();
            CalibrationEntry {
                horizon,
                threshold,
                ville_crossing: at_least(ville) as f64 / reps as f64,
                p_cdf,
            }
        })
        .collect();
    CalibrationTable {
        version: TABLE_VERSION,
        fingerprint: fingerprint(model),
        model: model.clone(),
        alpha,
        reps,
        seed,
        warning: (reps < MIN_RECOMMENDED_REPS)
            .then(|| format!("only {reps} replications; at least {MIN_RECOMMENDED_REPS} recommended")),
        entries,
    }
}

/// Calibrates thresholds for several levels on one set of null paths.
pub fn calibrate_levels(
    model: &ModelConfig,
    alphas: &[f64],
    horizons: &[u64],
    reps: usize,
    seed: u64,
) -> Result<Vec<CalibrationTable>> {
    if reps == 0 {
        return Err(Error::TooFewSamples("calibration needs at least one replication".into()));
    }
    if let Some(a) = alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {a}")));
    }
    if horizons.is_empty() {
        return Err(Error::InvalidInput("no horizons given".into()));
    }
    let maxima = simulate_null_maxima(model, horizons, reps, seed)?;
    Ok(alphas
        .iter()
        .map(|&alpha| table_from_maxima(model, alpha, horizons, &maxima, seed))
        .collect())
}

pub fn calibrate(
    model: &ModelConfig,
    alpha: f64,
    horizons: &[u64],
    reps: usize,
    seed: u64,
) -> Result<CalibrationTable> {
    Ok(calibrate_levels(model, &[alpha], horizons, reps, seed)?.remove(0))
}

/// Fraction of `reps` null paths whose e-process reaches `threshold` by `horizon`.
pub fn null_crossing_rate(
    model: &ModelConfig,
    threshold: f64,
    horizon: u64,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let maxima = simulate_null_maxima(model, &[horizon], reps, seed)?;
    let level = threshold.ln();
    Ok(maxima.iter().filter(|row| row[0] >= level).count() as f64 / reps.max(1) as f64)
}

fn builtin_tables() -> &'static [CalibrationTable] {
    static TABLES: OnceLock<Vec<CalibrationTable>> = OnceLock::new();
    TABLES.get_or_init(|| {
        serde_json::from_str(include_str!("../data/calibration.json"))
            .expect("bundled calibration tables are valid")
    })
}

/// Tables shipped with the library.
pub fn builtin() -> &'static [CalibrationTable] {
    builtin_tables()
}

/// Looks up a bundled threshold for `(model, alpha, horizon)`.
pub fn builtin_threshold(model: &ModelConfig, alpha: f64, horizon: u64) -> Result<f64> {
    builtin_tables()
        .iter()
        .filter(|t| t.matches(model, alpha))
        .find_map(|t| t.threshold_for(horizon))
        .ok_or_else(|| {
            Error::Config(format!(
                "no bundled calibration for this configuration at alpha = {alpha}, N = {horizon}; \
                 run the calibrate command and pass the threshold explicitly"
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Method;
    use crate::rank::RankState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn trivial_horizons() {
        let model = ModelConfig::default();
        assert_eq!(simulate_null_running_max(&model, 0, 1).unwrap(), 1.0);
        assert_eq!(simulate_null_running_max(&model, 1, 1).unwrap(), 1.0);
    }

    #[test]
    fn rank_driven_path_matches_ranked_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for method in [Method::Grid, Method::Seqbet] {
            for derandomize in [true, false] {
                let model = ModelConfig {
                    method,
                    derandomize,
                    bet_bits: 3,
                    ..ModelConfig::default()
                };
                let mut real = PathEngine::new(&model).unwrap();
                let mut virt = NullPath::new(&model).unwrap();
                let (mut rx, mut ry) = (RankState::new(), RankState::new());
                for _ in 0..300 {
                    let x: f64 = rng.sample(StandardNormal);
                    let y: f64 = rng.sample::<f64, _>(StandardNormal).powi(3);
                    let px = rx.insert_and_rank(x).unwrap();
                    let py = ry.insert_and_rank(y).unwrap();
                    let uv = (!derandomize).then(|| (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99)));
                    real.step(&px, &py, (x, y), uv).unwrap();
                    let log = virt.push_ranks(px.at_or_below, py.at_or_below, uv).unwrap();
                    assert_eq!(log, real.log_m());
                }
            }
        }
    }

    #[test]
    fn thresholds_monotone_and_capped() {
        let model = ModelConfig::default();
        let t = calibrate(&model, 0.05, &[32, 64, 128], 300, 7).unwrap();
        assert!(t.warning.is_some());
        let l: Vec<f64> = t.entries.iter().map(|e| e.threshold).collect();
        assert!(l[0] <= l[1] && l[1] <= l[2]);
        assert!(l.iter().all(|&v| (1.0..=20.0).contains(&v)));
        for e in &t.entries {
            let f: Vec<f64> = e.p_cdf.iter().map(|c| c.fraction).collect();
            assert!(f.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*f.last().unwrap(), 1.0);
        }
        let again = calibrate(&model, 0.05, &[32, 64, 128], 300, 7).unwrap();
        assert_eq!(t, again);
        let parsed = CalibrationTable::from_json(&t.to_json()).unwrap();
        assert_eq!(parsed, t);
    }

    #[test]
    fn order_statistic_convention() {
        assert_eq!(upper_order_index(0.95, 20), 18);
        assert_eq!(upper_order_index(0.95, 1000), 949);
        assert_eq!(upper_order_index(0.95, 1001), 950);
        assert!(matches!(
            calibrate(&ModelConfig::default(), 0.05, &[8], 0, 1),
            Err(Error::TooFewSamples(_))
        ));
    }

    #[test]
    fn fingerprint_ignores_nothing_relevant() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            sinkhorn: false,
            ..ModelConfig::default()
        };
        assert_ne!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a), fingerprint(&a.clone()));
        assert_eq!(fingerprint(&a).len(), 32);
    }
}
