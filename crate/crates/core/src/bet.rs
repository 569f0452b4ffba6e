//! Sequential binary expansion test.
//!
//! On the `2^k × 2^k` grid every pair of nonempty digit subsets `(a, b)`
//! defines a sign `σ(r, s) = ∏_{i∈a} rad_i(r) · ∏_{j∈b} rad_j(s)`, where
//! `rad_i` is `+1` or `−1` according to the `i`-th binary digit of the cell
//! index. Under independence `σ = +1` has probability one half, so each of
//! the `(2^k − 1)²` interactions gets a two-bin martingale and the test
//! averages them with equal weights.

use serde::{Deserialize, Serialize};

use crate::aggregate::log_sum_exp;
use crate::derandomize::AxisWeights;
use crate::error::{Error, Result};
use crate::grid::{axis_bin_of_fraction, bin_index, BinIndex, BinnedMartingale};
use crate::rank::batch_ranks;

/// Largest supported number of binary digits.
pub const MAX_BITS: u32 = 8;

/// One cross-interaction. Masks are over the bits of the cell index, so
/// digit `i` (most significant first) is bit `k − i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionRegion {
    pub bits: u32,
    pub x_mask: u32,
    pub y_mask: u32,
}

impl InteractionRegion {
    pub fn depth(&self) -> usize {
        1 << self.bits
    }

    /// Digit positions (1-based, most significant first) used on the first axis.
    pub fn x_digits(&self) -> Vec<u32> {
        digits(self.x_mask, self.bits)
    }

    pub fn y_digits(&self) -> Vec<u32> {
        digits(self.y_mask, self.bits)
    }

    /// Sign of the interaction on a grid cell.
    pub fn sign(&self, cell: BinIndex) -> i8 {
        let parity = (cell.k as u32 & self.x_mask).count_ones() + (cell.l as u32 & self.y_mask).count_ones();
        if parity % 2 == 0 {
            1
        } else {
            -1
        }
    }

    /// Whether the cell lies in the region where the sign is `+1`.
    pub fn contains(&self, cell: BinIndex) -> bool {
        self.sign(cell) == 1
    }

    pub fn sign_at(&self, r: f64, s: f64) -> Result<i8> {
        Ok(self.sign(bin_index(r, s, self.depth())?))
    }
}

fn digits(mask: u32, bits: u32) -> Vec<u32> {
    (1..=bits).filter(|i| mask & (1 << (bits - i)) != 0).collect()
}

/// All `(2^k − 1)²` cross-interactions of depth `2^k`.
pub fn interaction_regions(k: u32) -> Result<Vec<InteractionRegion>> {
    if !(1..=MAX_BITS).contains(&k) {
        return Err(Error::InvalidDepth(format!(
            "binary depth must be in 1..={MAX_BITS}, got {k}"
        )));
    }
    let top = 1u32 << k;
    Ok((1..top)
        .flat_map(|x_mask| {
            (1..top).map(move |y_mask| InteractionRegion {
                bits: k,
                x_mask,
                y_mask,
            })
        })
        .collect())
}

/// Two-bin martingales of all interactions at one depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetState {
    bits: u32,
    regions: Vec<InteractionRegion>,
    cores: Vec<BinnedMartingale>,
    activation: u64,
    buffer: Vec<(f64, f64)>,
    log_m: f64,
    #[serde(skip)]
    logs: Vec<f64>,
}

impl BetState {
    /// Depth `2^k`, active after `2^k` observations.
    pub fn new(k: u32) -> Result<Self> {
        Self::with_activation(k, 1u64 << k.min(MAX_BITS))
    }

    pub fn with_activation(k: u32, activation: u64) -> Result<Self> {
        let regions = interaction_regions(k)?;
        let cores = regions
            .iter()
            .map(|_| BinnedMartingale::new(2, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bits: k,
            logs: Vec::with_capacity(regions.len()),
            regions,
            cores,
            activation,
            buffer: Vec::new(),
            log_m: 0.0,
        })
    }

    pub fn depth(&self) -> usize {
        1 << self.bits
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn regions(&self) -> &[InteractionRegion] {
        &self.regions
    }

    /// Per-interaction martingales; bin 0 is the `σ = +1` half.
    pub fn interactions(&self) -> &[BinnedMartingale] {
        &self.cores
    }

    pub fn n_seen(&self) -> u64 {
        self.cores[0].n_seen() + self.buffer.len() as u64
    }

    /// Natural log of the averaged martingale.
    pub fn log_m(&self) -> f64 {
        self.log_m
    }

    fn refresh_average(&mut self) {
        self.logs.clear();
        self.logs.extend(self.cores.iter().map(|c| c.log_m()));
        self.log_m = log_sum_exp(&self.logs) - (self.regions.len() as f64).ln();
    }

    fn buffer_or_skip(&mut self, seed_point: (f64, f64)) -> bool {
        if self.n_seen() >= self.activation {
            return false;
        }
        self.buffer.push(seed_point);
        if self.n_seen() == self.activation {
            let d = self.depth();
            let xs: Vec<f64> = self.buffer.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = self.buffer.iter().map(|p| p.1).collect();
            self.buffer.clear();
            let rx = batch_ranks(&xs).expect("buffered values are finite");
            let ry = batch_ranks(&ys).expect("buffered values are finite");
            for (a, b) in rx.iter().zip(&ry) {
                let cell = BinIndex {
                    k: axis_bin_of_fraction(a.at_or_below, a.n, d),
                    l: axis_bin_of_fraction(b.at_or_below, b.n, d),
                };
                for (region, core) in self.regions.iter().zip(self.cores.iter_mut()) {
                    core.seed(if region.contains(cell) { 0 } else { 1 });
                }
            }
        }
        true
    }

    /// Randomized update; returns the new averaged log martingale.
    pub fn update(&mut self, r: f64, s: f64) -> Result<f64> {
        let cell = bin_index(r, s, self.depth())?;
        if self.buffer_or_skip((r, s)) {
            return Ok(self.log_m);
        }
        for (region, core) in self.regions.iter().zip(self.cores.iter_mut()) {
            core.observe(if region.contains(cell) { 0 } else { 1 });
        }
        self.refresh_average();
        Ok(self.log_m)
    }

    /// Derandomized update from per-axis cell weights.
    pub fn update_expected(
        &mut self,
        wx: &AxisWeights,
        wy: &AxisWeights,
        seed_point: (f64, f64),
    ) -> f64 {
        if self.buffer_or_skip(seed_point) {
            return self.log_m;
        }
        // σ factorizes over the axes, so P(σ = +1) = (1 + E[σ_x]·E[σ_y]) / 2.
        let top = 1usize << self.bits;
        let signed_mean = |w: &AxisWeights, mask: usize| -> f64 {
            w.entries()
                .iter()
                .map(|&(k, p)| if (k & mask).count_ones() % 2 == 0 { p } else { -p })
                .sum()
        };
        let ex: Vec<f64> = (0..top).map(|m| signed_mean(wx, m)).collect();
        let ey: Vec<f64> = (0..top).map(|m| signed_mean(wy, m)).collect();
        for (region, core) in self.regions.iter().zip(self.cores.iter_mut()) {
            let p = (0.5 * (1.0 + ex[region.x_mask as usize] * ey[region.y_mask as usize])).clamp(0.0, 1.0);
            core.observe_mixture(&[(0, p), (1, 1.0 - p)]);
        }
        self.refresh_average();
        self.log_m
    }
}
