//! Paired betting test with Kolmogorov–Smirnov witnesses.
//!
//! Observations are consumed in pairs `Z = ((x₁,y₁),(x₂,y₂))`. With the
//! witness `g(x,y) = 1{F̂(x) ≤ u, F̂(y) ≤ v}` and the swapped pair
//! `Z̃ = ((x₁,y₂),(x₂,y₁))`, the payoff
//!
//! ```text
//! g(Z) − g(Z̃) = (1{F̂(x₁)≤u} − 1{F̂(x₂)≤u}) · (1{F̂(y₁)≤v} − 1{F̂(y₂)≤v})
//! ```
//!
//! lies in {−1, 0, 1}. `F̂` is the empirical CDF of everything seen up to and
//! including the pair, which treats `y₁` and `y₂` symmetrically, so the
//! payoff has conditional mean zero under independence. Wealth grows by
//! `1 + λ·s·payoff` where the sign `s` and `(u, v)` maximize the summed
//! payoff on past pairs and `λ` follows online Newton steps on log-wealth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank::{check_finite, RankState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrConfig {
    /// Spacing of the witness grid on the rank scale.
    pub grid_step: f64,
    pub lambda_max: f64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            grid_step: 0.025,
            lambda_max: 0.5,
        }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_step > 0.0 && self.grid_step <= 1.0) {
            return Err(Error::Config(format!("grid step must lie in (0, 1], got {}", self.grid_step)));
        }
        if !(self.lambda_max > 0.0 && self.lambda_max < 1.0) {
            return Err(Error::Config(format!("lambda_max must lie in (0, 1), got {}", self.lambda_max)));
        }
        Ok(())
    }

    fn points(&self) -> usize {
        (1.0 / self.grid_step).round().max(1.0) as usize
    }
}

/// Current bet: `λ·sign` on the witness at grid cell `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub u: f64,
    pub v: f64,
    pub sign: i8,
}

/// Rank coordinates of one completed pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PairRanks {
    x: [f64; 2],
    y: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrState {
    config: SrConfig,
    xs: RankState,
    ys: RankState,
    pending: Option<(f64, f64)>,
    /// Summed past payoff of every grid witness, row-major in `(u, v)`.
    scores: Vec<i64>,
    witness: (usize, usize, i8),
    lambda: f64,
    /// Running sum of squared log-wealth gradients for the Newton step.
    curvature: f64,
    pairs: u64,
    log_m: f64,
}

const NEWTON_GAIN: f64 = 2.0 / (2.0 - 1.0986122886681098);

impl SrState {
    pub fn new(config: SrConfig) -> Result<Self> {
        config.validate()?;
        let k = config.points();
        Ok(Self {
            config,
            xs: RankState::new(),
            ys: RankState::new(),
            pending: None,
            scores: vec![0; k * k],
            witness: (k / 2, k / 2, 1),
            lambda: 0.0,
            curvature: 1.0,
            pairs: 0,
            log_m: 0.0,
        })
    }

    pub fn config(&self) -> &SrConfig {
        &self.config
    }

    /// Natural-log wealth.
    pub fn log_m(&self) -> f64 {
        self.log_m
    }

    pub fn pairs(&self) -> u64 {
        self.pairs
    }

    /// Raw observations consumed, including a pending one.
    pub fn n(&self) -> u64 {
        2 * self.pairs + self.pending.is_some() as u64
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn witness(&self) -> Witness {
        let step = self.config.grid_step;
        let (i, j, sign) = self.witness;
        Witness {
            u: (i + 1) as f64 * step,
            v: (j + 1) as f64 * step,
            sign,
        }
    }

    /// Payoff `g(Z) − g(Z̃)` of the witness `(u, v)` on one pair of ranks.
    pub fn payoff(rx: [f64; 2], ry: [f64; 2], u: f64, v: f64) -> i8 {
        let a = (rx[0] <= u) as i8 - (rx[1] <= u) as i8;
        let b = (ry[0] <= v) as i8 - (ry[1] <= v) as i8;
        a * b
    }

    /// Buffers odd observations; on even ones bets on the completed pair and
    /// returns the log increment.
    pub fn observe(&mut self, x: f64, y: f64) -> Result<Option<f64>> {
        let x = check_finite(x)?;
        let y = check_finite(y)?;
        let Some((x1, y1)) = self.pending.take() else {
            self.pending = Some((x, y));
            return Ok(None);
        };
        self.xs.insert(x1)?;
        self.xs.insert(x)?;
        self.ys.insert(y1)?;
        self.ys.insert(y)?;
        let n = self.xs.len() as f64;
        let ranks = PairRanks {
            x: [self.xs.counts(x1).0 as f64 / n, self.xs.counts(x).0 as f64 / n],
            y: [self.ys.counts(y1).0 as f64 / n, self.ys.counts(y).0 as f64 / n],
        };

        let w = self.witness();
        let z = (w.sign * Self::payoff(ranks.x, ranks.y, w.u, w.v)) as f64;
        let inc = (self.lambda * z).ln_1p();
        self.log_m += inc;
        self.pairs += 1;

        // online Newton step on −ln(1 + λz)
        let grad = -z / (1.0 + self.lambda * z);
        self.curvature += grad * grad;
        let max = self.config.lambda_max;
        self.lambda = (self.lambda - NEWTON_GAIN * grad / self.curvature).clamp(0.0, max);

        self.record(&ranks);
        Ok(Some(inc))
    }

    fn record(&mut self, ranks: &PairRanks) {
        let k = self.config.points();
        let step = self.config.grid_step;
        // the payoff is non-zero only for u between the two x ranks and v between the two y ranks
        let span = |r: [f64; 2]| -> Option<(usize, usize, i64)> {
            if r[0] == r[1] {
                return None;
            }
            let (lo, hi, s) = if r[0] < r[1] { (r[0], r[1], 1) } else { (r[1], r[0], -1) };
            let first = (0..k).find(|&i| (i + 1) as f64 * step >= lo)?;
            let end = (first..k).find(|&i| (i + 1) as f64 * step >= hi).unwrap_or(k);
            (first < end).then_some((first, end, s))
        };
        let (Some((xi, xe, sx)), Some((yi, ye, sy))) = (span(ranks.x), span(ranks.y)) else {
            return;
        };
        for i in xi..xe {
            for j in yi..ye {
                self.scores[i * k + j] += sx * sy;
            }
        }
        let mut best = (0i64, self.witness);
        for (idx, &s) in self.scores.iter().enumerate() {
            if s.abs() > best.0 {
                best = (s.abs(), (idx / k, idx % k, if s > 0 { 1 } else { -1 }));
            }
        }
        if best.0 > 0 {
            self.witness = best.1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Generator, Scenario};

    #[test]
    fn payoff_examples() {
        assert_eq!(SrState::payoff([0.1, 0.9], [0.2, 0.8], 0.5, 0.5), 1);
        assert_eq!(SrState::payoff([0.1, 0.9], [0.8, 0.2], 0.5, 0.5), -1);
        assert_eq!(SrState::payoff([0.1, 0.2], [0.2, 0.8], 0.5, 0.5), 0);
        assert!((1.5f64.ln() - (0.5f64 * 1.0).ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn odd_observations_are_buffered() {
        let mut s = SrState::new(SrConfig::default()).unwrap();
        assert_eq!(s.observe(0.1, 0.2).unwrap(), None);
        assert_eq!(s.n(), 1);
        assert!(s.observe(0.3, 0.4).unwrap().is_some());
        assert_eq!((s.n(), s.pairs()), (2, 1));
        assert!(s.observe(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn scores_match_direct_sum() {
        let mut s = SrState::new(SrConfig { grid_step: 0.1, lambda_max: 0.5 }).unwrap();
        let mut history = Vec::new();
        for (x, y) in Generator::with_sigma(Scenario::Linear, 0.2, 4, 0).take(200) {
            let pending = s.pending;
            s.observe(x, y).unwrap();
            if let Some((x1, y1)) = pending {
                let n = s.xs.len() as f64;
                history.push((
                    [s.xs.counts(x1).0 as f64 / n, s.xs.counts(x).0 as f64 / n],
                    [s.ys.counts(y1).0 as f64 / n, s.ys.counts(y).0 as f64 / n],
                ));
            }
        }
        let k = 10;
        for i in 0..k {
            for j in 0..k {
                let (u, v) = ((i + 1) as f64 * 0.1, (j + 1) as f64 * 0.1);
                let direct: i64 = history.iter().map(|(rx, ry)| SrState::payoff(*rx, *ry, u, v) as i64).sum();
                assert_eq!(s.scores[i * k + j], direct, "cell {i},{j}");
            }
        }
        let (i, j, sign) = s.witness;
        assert_eq!(s.scores[i * k + j].abs(), s.scores.iter().map(|v| v.abs()).max().unwrap());
        assert_eq!(sign as i64 * s.scores[i * k + j], s.scores[i * k + j].abs());
    }

    #[test]
    fn increments_are_bounded() {
        let mut s = SrState::new(SrConfig::default()).unwrap();
        for (x, y) in Generator::with_sigma(Scenario::Linear, 0.0, 1, 0).take(2000) {
            if let Some(inc) = s.observe(x, y).unwrap() {
                assert!(inc >= 0.5f64.ln() - 1e-15 && inc <= 1.5f64.ln() + 1e-15);
            }
            assert!((0.0..=0.5).contains(&s.lambda()));
        }
        assert!(s.log_m() > 20.0);
    }
}
