//! Removing the external randomization from the grid martingales.
//!
//! For tie-free data the randomized rank pair is uniform on the rectangle
//! `[F̂(x)−1/n, F̂(x)] × [Ĝ(y)−1/n, Ĝ(y)]`, so the conditional expectation of
//! the randomized increment is an area-weighted average of cell densities
//! and the conditional expectation of a cell count is the overlap area.
//! Both only need per-axis overlaps, since cells and rectangles are products
//! of intervals.
//!
//! Tied data cannot be derandomized this way; instead several randomized
//! paths are run and their anytime p-values merged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridState;
use crate::rank::{RankPair, RankRectangle};

/// Conditional probabilities of the cells along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisWeights {
    entries: Vec<(usize, f64)>,
}

impl AxisWeights {
    /// Exact overlaps of `[below/n, at_or_below/n]` with the `d` cells.
    pub fn from_rank(pair: &RankPair, d: usize) -> Self {
        let n = pair.n as u128;
        let d128 = d as u128;
        let lo = pair.below as u128 * d128;
        let hi = pair.at_or_below as u128 * d128;
        let len = (hi - lo) as f64;
        let first = (lo / n) as usize;
        let last = (hi.div_ceil(n) as usize).clamp(first + 1, d);
        let entries = (first..last)
            .filter_map(|k| {
                let cell_lo = k as u128 * n;
                let cell_hi = cell_lo + n;
                let overlap = hi.min(cell_hi).saturating_sub(lo.max(cell_lo));
                (overlap > 0).then(|| (k, overlap as f64 / len))
            })
            .collect();
        Self { entries }
    }

    /// Overlaps of `[lo, hi]` with the `d` cells, relative to its length.
    pub fn from_interval(lo: f64, hi: f64, d: usize) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidRectangle(format!("interval [{lo}, {hi}]")));
        }
        let df = d as f64;
        let len = hi - lo;
        let first = ((lo * df).floor() as usize).min(d - 1);
        let last = ((hi * df).ceil() as usize).clamp(first + 1, d);
        let entries = (first..last)
            .filter_map(|k| {
                let a = lo.max(k as f64 / df);
                let b = hi.min((k + 1) as f64 / df);
                (b > a).then(|| (k, (b - a) / len))
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }
}

/// Cell probabilities (row-major `d × d`) of a uniform draw from `rect`.
pub fn bin_probabilities(rect: &RankRectangle, d: usize) -> Result<Vec<f64>> {
    if d == 0 {
        return Err(Error::InvalidDepth("depth must be positive".into()));
    }
    let wx = AxisWeights::from_interval(rect.x_lo, rect.x_hi, d)?;
    let wy = AxisWeights::from_interval(rect.y_lo, rect.y_hi, d)?;
    let mut probs = vec![0.0; d * d];
    for &(k, pk) in wx.entries() {
        for &(l, pl) in wy.entries() {
            probs[k * d + l] = pk * pl;
        }
    }
    Ok(probs)
}

/// Derandomized update of one grid from tie-free sequential ranks.
///
/// Returns the log of the expected randomized increment; the grid's counts
/// grow by the expected cell counts.
pub fn derandomized_increment(
    grid: &mut GridState,
    px: &RankPair,
    py: &RankPair,
    seed_point: (f64, f64),
) -> Result<f64> {
    if px.is_tied() || py.is_tied() {
        return Err(Error::TiesPresent(format!(
            "tied ranks at n = {} cannot be derandomized",
            px.n
        )));
    }
    let d = grid.depth();
    let wx = AxisWeights::from_rank(px, d);
    let wy = AxisWeights::from_rank(py, d);
    Ok(grid.update_expected(&wx, &wy, seed_point))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    #[default]
    Arithmetic,
    Geometric,
}

/// Anytime p-value merged over randomization paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergedPValue {
    pub method: MergeMethod,
    pub paths: usize,
    /// Unclamped merged value; may exceed one.
    pub raw: f64,
}

impl MergedPValue {
    /// Reported p-value, clamped to at most one.
    pub fn value(&self) -> f64 {
        self.raw.min(1.0)
    }
}

/// Merges per-path running maxima `max_{n≤N} M_n(b)` into one p-value.
///
/// Arithmetic: `2/B · Σ 1/max_b`. Geometric: `e · ∏ max_b^{−1/B}`.
pub fn merge_pvalues(running_maxima: &[f64], method: MergeMethod) -> Result<MergedPValue> {
    if running_maxima.is_empty() {
        return Err(Error::InvalidInput("no paths to merge".into()));
    }
    if let Some(bad) = running_maxima.iter().find(|&&m| !(m >= 1.0)) {
        return Err(Error::InvalidInput(format!("running maximum {bad} is below 1")));
    }
    let b = running_maxima.len() as f64;
    let raw = match method {
        MergeMethod::Arithmetic => 2.0 / b * running_maxima.iter().map(|m| 1.0 / m).sum::<f64>(),
        MergeMethod::Geometric => {
            let mean_log = running_maxima.iter().map(|m| m.ln()).sum::<f64>() / b;
            (1.0 - mean_log).exp()
        }
    };
    Ok(MergedPValue {
        method,
        paths: running_maxima.len(),
        raw,
    })
}

/// Same as [`merge_pvalues`] with natural-log maxima as input.
pub fn merge_log_maxima(log_maxima: &[f64], method: MergeMethod) -> Result<MergedPValue> {
    if log_maxima.is_empty() {
        return Err(Error::InvalidInput("no paths to merge".into()));
    }
    let b = log_maxima.len() as f64;
    let raw = match method {
        MergeMethod::Arithmetic => 2.0 / b * log_maxima.iter().map(|m| (-m).exp()).sum::<f64>(),
        MergeMethod::Geometric => (1.0 - log_maxima.iter().sum::<f64>() / b).exp(),
    };
    Ok(MergedPValue {
        method,
        paths: log_maxima.len(),
        raw,
    })
}
