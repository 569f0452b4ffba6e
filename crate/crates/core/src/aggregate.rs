//! Combining per-depth martingales into one e-process.
//!
//! At step `n` depth `d` receives weight `w_{d,n} ∝ w_d · M_{n−1}^{(d)}^η` and
//! the aggregate bets with the mixture density
//!
//! ```text
//! w0 + (1 − w0) · Σ_d w_{d,n} f_n^{(d)}
//! ```
//!
//! `η = 0` mixes densities with fixed weights, `η = 1` with `w0 = 0` is the
//! plain weighted average of the per-depth martingales. Inactive depths
//! contribute `f = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerically stable `ln Σ exp(x_i)`; `−∞` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(e^a + e^b)`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub depths: Vec<usize>,
    /// Per-depth prior weights, summing to one.
    pub weights: Vec<f64>,
    /// Inverse temperature; 0 mixes densities, 1 mixes martingales.
    pub eta: f64,
    /// Constant part of the mixture density.
    pub w0: f64,
}

impl AggregatorConfig {
    /// Depths 2, 4, 8, 16 with equal weights; `w0 = 0.2` for `η = 0`.
    pub fn default_for_eta(eta: f64) -> Self {
        let depths = vec![2, 4, 8, 16];
        Self {
            weights: vec![0.25; depths.len()],
            depths,
            eta,
            w0: if eta == 0.0 { 0.2 } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::Config("at least one depth is required".into()));
        }
        if self.depths.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} depths but {} weights",
                self.depths.len(),
                self.weights.len()
            )));
        }
        if self.depths.contains(&0) {
            return Err(Error::Config("depths must be positive".into()));
        }
        let mut sorted = self.depths.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.depths.len() {
            return Err(Error::Config("depths must be distinct".into()));
        }
        if let Some(w) = self.weights.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("weight {w} is not positive")));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights sum to {total}, expected 1")));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.w0) {
            return Err(Error::Config(format!("w0 must lie in [0, 1), got {}", self.w0)));
        }
        Ok(())
    }
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self::default_for_eta(0.0)
    }
}

/// Per-depth log-martingale ledger and the aggregate log e-process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorState {
    config: AggregatorConfig,
    log_weights: Vec<f64>,
    ledger: Vec<f64>,
    log_m: f64,
    #[serde(skip)]
    scratch: Vec<f64>,
}

impl AggregatorState {
    pub fn new(config: AggregatorConfig) -> Result<Self> {
        config.validate()?;
        let k = config.depths.len();
        let total: f64 = config.weights.iter().sum();
        Ok(Self {
            log_weights: config.weights.iter().map(|w| (w / total).ln()).collect(),
            config,
            ledger: vec![0.0; k],
            log_m: 0.0,
            scratch: Vec::with_capacity(k),
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn depths(&self) -> &[usize] {
        &self.config.depths
    }

    /// Natural-log martingale of each depth.
    pub fn per_depth_log_m(&self) -> &[f64] {
        &self.ledger
    }

    /// Natural-log aggregate e-process.
    pub fn log_m(&self) -> f64 {
        self.log_m
    }

    /// Current mixture weights `w_{d,n}` in log space.
    pub fn current_log_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.fill_log_weights(&mut out);
        out
    }

    fn fill_log_weights(&self, out: &mut Vec<f64>) {
        out.clear();
        let eta = self.config.eta;
        if eta == 0.0 {
            out.extend_from_slice(&self.log_weights);
            return;
        }
        out.extend(self.log_weights.iter().zip(&self.ledger).map(|(w, l)| w + eta * l));
        let norm = log_sum_exp(out);
        for w in out.iter_mut() {
            *w -= norm;
        }
    }

    /// Advances all depths by their log densities at this step and returns
    /// the log increment of the aggregate.
    pub fn step(&mut self, log_densities: &[f64]) -> Result<f64> {
        if log_densities.len() != self.ledger.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} per-depth densities, got {}",
                self.ledger.len(),
                log_densities.len()
            )));
        }
        let mut terms = std::mem::take(&mut self.scratch);
        self.fill_log_weights(&mut terms);
        let w0 = self.config.w0;
        let largest = log_densities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let inc = if largest < 30.0 {
            // ln(1 + Σ w (f − 1)) keeps inactive steps exactly at zero
            let excess: f64 = terms
                .iter()
                .zip(log_densities)
                .map(|(w, f)| w.exp() * f.exp_m1())
                .sum();
            ((1.0 - w0) * excess).ln_1p()
        } else {
            for (t, f) in terms.iter_mut().zip(log_densities) {
                *t += f;
            }
            let mixed = log_sum_exp(&terms);
            if w0 == 0.0 {
                mixed
            } else {
                log_add_exp(w0.ln(), (1.0 - w0).ln() + mixed)
            }
        };
        self.scratch = terms;
        for (l, f) in self.ledger.iter_mut().zip(log_densities) {
            *l += f;
        }
        self.log_m += inc;
        Ok(inc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(depths: Vec<usize>, weights: Vec<f64>, eta: f64, w0: f64) -> AggregatorConfig {
        AggregatorConfig {
            depths,
            weights,
            eta,
            w0,
        }
    }

    #[test]
    fn inactive_depths_give_zero() {
        for eta in [0.0, 0.5, 1.0] {
            let mut a = AggregatorState::new(AggregatorConfig::default_for_eta(eta)).unwrap();
            assert_eq!(a.step(&[0.0; 4]).unwrap(), 0.0);
        }
    }

    #[test]
    fn eta_one_is_weighted_sum() {
        let mut a = AggregatorState::new(config(vec![2, 4], vec![0.5, 0.5], 1.0, 0.0)).unwrap();
        a.step(&[2f64.ln(), 4f64.ln()]).unwrap();
        assert!((a.log_m().exp() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eta_zero_hand_value() {
        let mut a = AggregatorState::new(AggregatorConfig::default()).unwrap();
        let f = [1.2f64, 0.9, 1.0, 1.1].map(f64::ln);
        let inc = a.step(&f).unwrap();
        assert!((inc - 1.04f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn defaults() {
        let zero = AggregatorConfig::default_for_eta(0.0);
        assert_eq!(zero.depths, vec![2, 4, 8, 16]);
        assert_eq!(zero.w0, 0.2);
        // effective per-depth weight (1 − w0)·w_d
        assert!(zero.weights.iter().all(|w| ((1.0 - zero.w0) * w - 0.2).abs() < 1e-15));
        let one = AggregatorConfig::default_for_eta(1.0);
        assert_eq!((one.weights.clone(), one.w0), (vec![0.25; 4], 0.0));
        assert!(config(vec![2, 4], vec![0.6, 0.4], 0.0, 0.2).validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        assert!(config(vec![2, 2], vec![0.5, 0.5], 0.0, 0.0).validate().is_err());
        assert!(config(vec![2, 4], vec![0.5, 0.6], 0.0, 0.0).validate().is_err());
        assert!(config(vec![2], vec![1.0], -1.0, 0.0).validate().is_err());
        assert!(config(vec![2], vec![1.0], 0.0, 1.0).validate().is_err());
        assert!(config(vec![], vec![], 0.0, 0.0).validate().is_err());
        let mut a = AggregatorState::new(AggregatorConfig::default()).unwrap();
        assert!(matches!(a.step(&[0.0; 3]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_add_exp(-1000.0, -1000.0) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn eta_one_tracks_weighted_average(
            steps in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..60),
            raw in prop::collection::vec(0.1f64..1.0, 3),
        ) {
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let mut a = AggregatorState::new(config(vec![2, 4, 8], w.clone(), 1.0, 0.0)).unwrap();
            for s in &steps {
                a.step(s).unwrap();
                let direct: f64 = w.iter().zip(a.per_depth_log_m()).map(|(w, l)| w * l.exp()).sum();
                prop_assert!((a.log_m().exp() / direct - 1.0).abs() < 1e-10);
                for (wd, l) in w.iter().zip(a.per_depth_log_m()) {
                    prop_assert!(a.log_m() >= wd.ln() + l - 1e-12);
                }
            }
        }

        #[test]
        fn eta_zero_without_constant_is_density_mixture(
            f in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let mut a = AggregatorState::new(config(vec![2, 4, 8, 16], vec![0.25; 4], 0.0, 0.0)).unwrap();
            let inc = a.step(&f).unwrap();
            let direct: f64 = f.iter().map(|l| 0.25 * l.exp()).sum::<f64>().ln();
            prop_assert!((inc - direct).abs() < 1e-12);
        }
    }
}
