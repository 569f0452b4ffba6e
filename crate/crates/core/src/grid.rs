//! Binned histogram test martingales on the unit square.
//!
//! For a depth `d` the square is cut into `d²` cells that are left-open and
//! right-closed (the first row and column also contain 0). The predictive
//! density for the next randomized rank pair is the histogram of all earlier
//! pairs with a pseudo-count `c0` in every cell, and the test martingale is
//! the running product of predictive densities at the observed cells:
//!
//! ```text
//! f_n(cell) = d² (b_cell + c0) / (n − 1 + c0·d²)
//! ```
//!
//! With `c0 = 1` the product telescopes to
//! `d^{2N} (d²−1)! ∏ b! / (N−1+d²)!`, which [`closed_form_log_m`] evaluates
//! through log-gamma and serves as an oracle for the incremental update.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::derandomize::AxisWeights;
use crate::error::{Error, Result};
use crate::rank::batch_ranks;
use crate::sinkhorn::{SinkhornOptions, WarmProjector};

/// Cell coordinates `(k, ℓ)` with `k` indexing the first coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinIndex {
    pub k: usize,
    pub l: usize,
}

impl BinIndex {
    pub fn flat(&self, d: usize) -> usize {
        self.k * d + self.l
    }
}

/// Cell index along one axis; interior edges belong to the lower cell.
pub fn axis_bin(r: f64, d: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidRank(r));
    }
    let scaled = (r * d as f64).ceil() as usize;
    Ok(scaled.saturating_sub(1).min(d - 1))
}

/// Cell index of the exact fraction `count/n`.
pub fn axis_bin_of_fraction(count: u64, n: u64, d: usize) -> usize {
    if count == 0 {
        return 0;
    }
    let d = d as u128;
    let (count, n) = (count as u128, n as u128);
    ((count * d).div_ceil(n) - 1) as usize
}

pub fn bin_index(r: f64, s: f64, d: usize) -> Result<BinIndex> {
    if d == 0 {
        return Err(Error::InvalidDepth("depth must be positive".into()));
    }
    Ok(BinIndex {
        k: axis_bin(r, d)?,
        l: axis_bin(s, d)?,
    })
}

/// Multinomial likelihood-ratio martingale over `m` equiprobable bins.
///
/// This is the counting core shared by the `d × d` grid and the two-bin
/// cross-interaction martingales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedMartingale {
    counts: Vec<f64>,
    c0: f64,
    n_seen: u64,
    log_m: f64,
}

impl BinnedMartingale {
    pub fn new(bins: usize, c0: f64) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidInput("need at least one bin".into()));
        }
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(Error::Config(format!("initial count must be positive, got {c0}")));
        }
        Ok(Self {
            counts: vec![0.0; bins],
            c0,
            n_seen: 0,
            log_m: 0.0,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn log_m(&self) -> f64 {
        self.log_m
    }

    /// Predictive density (relative to uniform) of bin `b`.
    pub fn predictive(&self, b: usize) -> f64 {
        let m = self.counts.len() as f64;
        m * (self.counts[b] + self.c0) / (self.n_seen as f64 + self.c0 * m)
    }

    /// Adds an observation to the counts without betting on it.
    pub fn seed(&mut self, b: usize) {
        self.counts[b] += 1.0;
        self.n_seen += 1;
    }

    /// Bets on bin `b`, then records it. Returns the log increment.
    pub fn observe(&mut self, b: usize) -> f64 {
        let inc = self.predictive(b).ln();
        self.counts[b] += 1.0;
        self.n_seen += 1;
        self.log_m += inc;
        inc
    }

    /// Bets with the expected density under `probs` and records expected counts.
    pub fn observe_mixture(&mut self, probs: &[(usize, f64)]) -> f64 {
        let expected: f64 = probs.iter().map(|&(b, p)| p * self.predictive(b)).sum();
        let inc = expected.ln();
        for &(b, p) in probs {
            self.counts[b] += p;
        }
        self.n_seen += 1;
        self.log_m += inc;
        inc
    }

    /// Records an externally computed increment together with expected counts.
    pub(crate) fn record(&mut self, probs: impl IntoIterator<Item = (usize, f64)>, inc: f64) {
        for (b, p) in probs {
            self.counts[b] += p;
        }
        self.n_seen += 1;
        self.log_m += inc;
    }
}

/// One depth of the grid test: counts, activation buffer and optional
/// uniform-margin correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridState {
    depth: usize,
    core: BinnedMartingale,
    activation: u64,
    buffer: Vec<(f64, f64)>,
    projector: Option<WarmProjector>,
}

impl GridState {
    /// Grid of depth `d` that is active from the `d+1`-th observation on.
    pub fn new(d: usize, c0: f64) -> Result<Self> {
        Self::with_activation(d, c0, d as u64)
    }

    pub fn with_activation(d: usize, c0: f64, activation: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDepth("depth must be positive".into()));
        }
        Ok(Self {
            depth: d,
            core: BinnedMartingale::new(d * d, c0)?,
            activation,
            buffer: Vec::new(),
            projector: None,
        })
    }

    /// Enables the Sinkhorn correction of the predictive density.
    pub fn with_sinkhorn(mut self, options: SinkhornOptions) -> Self {
        self.projector = Some(WarmProjector::new(self.depth, options));
        self
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn c0(&self) -> f64 {
        self.core.c0()
    }

    pub fn activation(&self) -> u64 {
        self.activation
    }

    /// Observations seen so far, including buffered ones.
    pub fn n_seen(&self) -> u64 {
        self.core.n_seen() + self.buffer.len() as u64
    }

    pub fn is_active(&self) -> bool {
        self.n_seen() >= self.activation
    }

    pub fn log_m(&self) -> f64 {
        self.core.log_m()
    }

    /// Cell counts in row-major order, pseudo-counts excluded.
    pub fn counts(&self) -> &[f64] {
        self.core.counts()
    }

    pub fn core(&self) -> &BinnedMartingale {
        &self.core
    }

    fn refresh(&mut self) {
        if let Some(p) = self.projector.as_mut() {
            p.refresh_versioned(self.core.counts(), self.core.c0(), self.core.n_seen());
        }
    }

    fn weight_flat(&self, idx: usize) -> f64 {
        match &self.projector {
            Some(p) => p.density(self.core.counts(), self.core.c0(), idx),
            None => self.core.predictive(idx),
        }
    }

    /// Predictive density at `cell`; integrates to one over the square.
    pub fn density_at(&mut self, cell: BinIndex) -> f64 {
        self.refresh();
        self.weight_flat(cell.flat(self.depth))
    }

    /// Predictive densities of all cells in row-major order.
    pub fn densities(&mut self) -> Vec<f64> {
        self.refresh();
        (0..self.depth * self.depth).map(|i| self.weight_flat(i)).collect()
    }

    fn buffer_or_skip(&mut self, seed_point: (f64, f64)) -> bool {
        if self.n_seen() >= self.activation {
            return false;
        }
        self.buffer.push(seed_point);
        if self.n_seen() == self.activation {
            self.backfill();
        }
        true
    }

    fn backfill(&mut self) {
        let xs: Vec<f64> = self.buffer.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = self.buffer.iter().map(|p| p.1).collect();
        self.buffer.clear();
        if xs.is_empty() {
            return;
        }
        let rx = batch_ranks(&xs).expect("buffered values are finite");
        let ry = batch_ranks(&ys).expect("buffered values are finite");
        for (a, b) in rx.iter().zip(&ry) {
            let k = axis_bin_of_fraction(a.at_or_below, a.n, self.depth);
            let l = axis_bin_of_fraction(b.at_or_below, b.n, self.depth);
            self.core.seed(k * self.depth + l);
        }
    }

    /// Randomized update with the rank pair `(r, s)`.
    ///
    /// Until the grid is active the pair is buffered and the increment is 0;
    /// at activation the counts are seeded from the batch ranks of the
    /// buffered pairs.
    pub fn update(&mut self, r: f64, s: f64) -> Result<f64> {
        let cell = bin_index(r, s, self.depth)?;
        if self.buffer_or_skip((r, s)) {
            return Ok(0.0);
        }
        let idx = cell.flat(self.depth);
        self.refresh();
        let inc = self.weight_flat(idx).ln();
        self.core.record([(idx, 1.0)], inc);
        Ok(inc)
    }

    /// Derandomized update: bet with the expected density over the rank
    /// rectangle described by per-axis cell weights, then add expected counts.
    ///
    /// `seed_point` is buffered for the batch-rank seeding before activation.
    pub fn update_expected(
        &mut self,
        wx: &AxisWeights,
        wy: &AxisWeights,
        seed_point: (f64, f64),
    ) -> f64 {
        if self.buffer_or_skip(seed_point) {
            return 0.0;
        }
        self.refresh();
        let d = self.depth;
        let mut expected = 0.0;
        for &(k, pk) in wx.entries() {
            for &(l, pl) in wy.entries() {
                expected += pk * pl * self.weight_flat(k * d + l);
            }
        }
        let inc = expected.ln();
        let cells = wx
            .entries()
            .iter()
            .flat_map(|&(k, pk)| wy.entries().iter().map(move |&(l, pl)| (k * d + l, pk * pl)));
        self.core.record(cells, inc);
        inc
    }

    /// Sweeps used by the most recent projection, if enabled.
    pub fn last_sweeps(&self) -> Option<usize> {
        self.projector.as_ref().map(|p| p.last_sweeps())
    }

    /// Whether the Sinkhorn projection is enabled.
    pub fn corrected(&self) -> bool {
        self.projector.is_some()
    }
}

/// `log M_N` of the grid martingale with one pseudo-count per cell.
pub fn closed_form_log_m(counts: &[u64], n: u64, d: usize) -> Result<f64> {
    closed_form_log_m_with_prior(counts, n, d, 1.0)
}

/// Closed form for a general pseudo-count `c0` (factorials become gamma
/// functions).
pub fn closed_form_log_m_with_prior(counts: &[u64], n: u64, d: usize, c0: f64) -> Result<f64> {
    if counts.len() != d * d {
        return Err(Error::InvalidCounts(format!(
            "expected {} cells, got {}",
            d * d,
            counts.len()
        )));
    }
    let total: u64 = counts.iter().sum();
    if total != n {
        return Err(Error::InvalidCounts(format!("counts sum to {total}, expected {n}")));
    }
    Ok(multinomial_log_m(counts, c0))
}

/// `log M_N` of a [`BinnedMartingale`] over `counts.len()` equiprobable bins
/// after observing the given bin counts, in any order.
pub fn multinomial_log_m(counts: &[u64], c0: f64) -> f64 {
    let n: u64 = counts.iter().sum();
    let bins = counts.len() as f64;
    let mut out = n as f64 * bins.ln() + ln_gamma(c0 * bins) - ln_gamma(n as f64 + c0 * bins);
    for &b in counts {
        out += ln_gamma(b as f64 + c0) - ln_gamma(c0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bin_index_examples() {
        assert_eq!(bin_index(0.3, 0.8, 2).unwrap(), BinIndex { k: 0, l: 1 });
        assert_eq!(bin_index(0.5, 0.5, 2).unwrap(), BinIndex { k: 0, l: 0 });
        assert_eq!(bin_index(1.0, 1.0, 4).unwrap(), BinIndex { k: 3, l: 3 });
        assert_eq!(bin_index(0.0, 0.0, 4).unwrap(), BinIndex { k: 0, l: 0 });
        assert!(matches!(bin_index(1.2, 0.5, 2), Err(Error::InvalidRank(_))));
        assert!(matches!(bin_index(0.2, -0.1, 2), Err(Error::InvalidRank(_))));
    }

    #[test]
    fn fraction_bins_agree_with_float_bins() {
        for n in 1..40u64 {
            for c in 0..=n {
                for d in [2usize, 3, 4, 8, 16] {
                    let exact = axis_bin_of_fraction(c, n, d);
                    let float = axis_bin(c as f64 / n as f64, d).unwrap();
                    assert_eq!(exact, float, "c={c} n={n} d={d}");
                }
            }
        }
    }

    #[test]
    fn fresh_density_is_uniform() {
        for d in [1, 2, 4, 8] {
            let mut g = GridState::with_activation(d, 1.0, 0).unwrap();
            assert_eq!(g.density_at(BinIndex { k: 0, l: d - 1 }), 1.0);
        }
    }

    fn grid_with_counts(c0: f64) -> GridState {
        let mut g = GridState::with_activation(2, c0, 0).unwrap();
        // cells (0,0) twice, (0,1) once
        g.core.seed(0);
        g.core.seed(0);
        g.core.seed(1);
        g
    }

    #[test]
    fn density_hand_values() {
        let mut g = grid_with_counts(1.0);
        assert!((g.density_at(BinIndex { k: 0, l: 0 }) - 12.0 / 7.0).abs() < 1e-14);
        let mut g = grid_with_counts(0.5);
        assert!((g.density_at(BinIndex { k: 0, l: 0 }) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn first_observation_is_free_under_activation() {
        for d in [1usize, 2, 4] {
            let mut g = GridState::new(d, 1.0).unwrap();
            assert_eq!(g.update(0.3, 0.9).unwrap(), 0.0);
            assert_eq!(g.log_m(), 0.0);
        }
    }

    #[test]
    fn two_step_closed_forms() {
        let mut g = GridState::with_activation(2, 1.0, 0).unwrap();
        g.update(0.1, 0.1).unwrap();
        g.update(0.2, 0.3).unwrap();
        assert!((g.log_m() - 1.6f64.ln()).abs() < 1e-14);

        let mut g = GridState::with_activation(2, 1.0, 0).unwrap();
        g.update(0.1, 0.1).unwrap();
        g.update(0.8, 0.3).unwrap();
        assert!((g.log_m() - 0.8f64.ln()).abs() < 1e-14);

        assert_eq!(closed_form_log_m(&[0; 4], 0, 2).unwrap(), 0.0);
        assert!((closed_form_log_m(&[2, 0, 0, 0], 2, 2).unwrap() - 1.6f64.ln()).abs() < 1e-13);
        assert!((closed_form_log_m(&[1, 1, 0, 0], 2, 2).unwrap() - 0.8f64.ln()).abs() < 1e-13);
        assert!(matches!(
            closed_form_log_m(&[1, 0, 0, 0], 2, 2),
            Err(Error::InvalidCounts(_))
        ));
    }

    #[test]
    fn incremental_matches_closed_form_with_gamma_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &c0 in &[0.5, 1.0, 2.5] {
            let d = 4;
            let mut g = GridState::with_activation(d, c0, 0).unwrap();
            let mut counts = vec![0u64; d * d];
            for _ in 0..300 {
                let (r, s): (f64, f64) = (rng.random(), rng.random::<f64>().powi(3));
                g.update(r, s).unwrap();
                counts[bin_index(r, s, d).unwrap().flat(d)] += 1;
            }
            let closed = closed_form_log_m_with_prior(&counts, 300, d, c0).unwrap();
            assert!((g.log_m() - closed).abs() < 1e-9);
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [2usize, 3, 8] {
            let mut g = GridState::with_activation(d, 1.0, 0).unwrap();
            for _ in 0..200 {
                g.update(rng.random::<f64>().sqrt(), rng.random()).unwrap();
                let total: f64 = g.densities().iter().sum::<f64>() / (d * d) as f64;
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_seeds_permutation_counts() {
        let mut g = GridState::new(4, 1.0).unwrap();
        for (r, s) in [(0.9, 0.1), (0.2, 0.3), (0.5, 0.95), (0.1, 0.6)] {
            assert_eq!(g.update(r, s).unwrap(), 0.0);
        }
        assert!(g.is_active());
        let counts = g.counts();
        assert_eq!(counts.iter().sum::<f64>(), 4.0);
        for k in 0..4 {
            let row: f64 = (0..4).map(|l| counts[k * 4 + l]).sum();
            let col: f64 = (0..4).map(|l| counts[l * 4 + k]).sum();
            assert_eq!((row, col), (1.0, 1.0));
        }
        // batch ranks: x = (4,2,3,1)/4, y = (1,2,4,3)/4
        assert_eq!(counts[3 * 4], 1.0);
        assert_eq!(counts[4 + 1], 1.0);
        assert_eq!(counts[2 * 4 + 3], 1.0);
        assert_eq!(counts[2], 1.0);
        assert_ne!(g.update(0.7, 0.7).unwrap(), 0.0);
    }
}
