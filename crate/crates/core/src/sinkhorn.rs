//! Iterative proportional fitting onto uniform margins.
//!
//! Randomized ranks have uniform marginals under every alternative, so the
//! cell-probability matrix of the histogram can be rescaled to row and
//! column sums `1/d` without losing growth rate. The projection alternates
//! row and column normalization and stops once every margin is within the
//! multiplicative band `(1/(tol·d), tol/d)` or after `max_iter` sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BinIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub max_iter: usize,
    pub tol_factor: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol_factor: 1.001,
        }
    }
}

/// Square matrix of positive cell masses, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl CellMatrix {
    pub fn new(d: usize, entries: Vec<f64>) -> Result<Self> {
        if d == 0 || entries.len() != d * d {
            return Err(Error::InvalidMatrix(format!(
                "expected {}x{} entries, got {}",
                d,
                d,
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidMatrix(format!("entry {bad} is not positive")));
        }
        Ok(Self { d, entries })
    }

    pub fn uniform(d: usize) -> Self {
        let v = 1.0 / (d * d) as f64;
        Self {
            d,
            entries: vec![v; d * d],
        }
    }

    pub fn depth(&self) -> usize {
        self.d
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.entries[k * self.d + l]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks(self.d).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for row in self.entries.chunks(self.d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Whether all margins lie strictly inside `(1/(tol·d), tol/d)`.
    pub fn margins_within(&self, tol_factor: f64) -> bool {
        let d = self.d as f64;
        let (lo, hi) = (1.0 / (tol_factor * d), tol_factor / d);
        self.row_sums()
            .into_iter()
            .chain(self.col_sums())
            .all(|s| s > lo && s < hi)
    }
}

/// Result of a projection together with the number of sweeps it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub matrix: CellMatrix,
    pub sweeps: usize,
    pub converged: bool,
}

struct Scaling<'a> {
    d: usize,
    row: &'a mut [f64],
    col: &'a mut [f64],
    /// `Σ_l e_kl·col_l` for each row, then column accumulators.
    work: &'a mut Vec<f64>,
}

impl Scaling<'_> {
    fn fill_row_dots(&mut self, entries: &[f64]) {
        let d = self.d;
        self.work.clear();
        self.work.extend(
            entries
                .chunks_exact(d)
                .map(|r| r.iter().zip(self.col.iter()).map(|(e, c)| e * c).sum::<f64>()),
        );
    }

    /// Row then column normalization. Expects the row dots in `work`.
    fn sweep(&mut self, entries: &[f64]) {
        let d = self.d;
        let target = 1.0 / d as f64;
        for (r, s) in self.row.iter_mut().zip(self.work.iter()) {
            *r = target / s;
        }
        self.work.clear();
        self.work.resize(d, 0.0);
        for (r, chunk) in self.row.iter().zip(entries.chunks_exact(d)) {
            for (acc, e) in self.work.iter_mut().zip(chunk) {
                *acc += r * e;
            }
        }
        for (c, s) in self.col.iter_mut().zip(self.work.iter()) {
            *c = target / s;
        }
    }

    /// Runs sweeps until the band holds, at least one and at most
    /// `max_iter`. Returns the sweep count, total mass and convergence.
    ///
    /// Column sums equal `1/d` right after a sweep, so only rows need
    /// checking; their dot products are reused by the next sweep.
    fn run(&mut self, entries: &[f64], options: &SinkhornOptions) -> (usize, f64, bool) {
        let df = self.d as f64;
        let (lo, hi) = (1.0 / (options.tol_factor * df), options.tol_factor / df);
        self.fill_row_dots(entries);
        let mut sweeps = 0;
        loop {
            self.sweep(entries);
            sweeps += 1;
            self.fill_row_dots(entries);
            let mut total = 0.0;
            let mut ok = true;
            for (r, s) in self.row.iter().zip(self.work.iter()) {
                let m = r * s;
                ok &= m > lo && m < hi;
                total += m;
            }
            if ok || sweeps >= options.max_iter.max(1) {
                return (sweeps, total, ok);
            }
        }
    }
}

/// Projects `c` onto matrices with row and column sums `1/d`.
pub fn project_uniform_margins(c: &CellMatrix, options: SinkhornOptions) -> Result<CellMatrix> {
    Ok(project_with_report(c, options)?.matrix)
}

pub fn project_with_report(c: &CellMatrix, options: SinkhornOptions) -> Result<Projection> {
    if let Some(bad) = c.entries.iter().find(|&&e| !(e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidMatrix(format!("entry {bad} is not positive")));
    }
    let d = c.d;
    let mut row = vec![1.0; d];
    let mut col = vec![1.0; d];
    let mut work = Vec::with_capacity(d);
    let mut scaling = Scaling {
        d,
        row: &mut row,
        col: &mut col,
        work: &mut work,
    };
    let (sweeps, total, converged) = scaling.run(&c.entries, &options);
    let mut entries = c.entries.clone();
    for (k, chunk) in entries.chunks_mut(d).enumerate() {
        for (l, e) in chunk.iter_mut().enumerate() {
            *e = row[k] * *e * col[l] / total;
        }
    }
    Ok(Projection {
        matrix: CellMatrix { d, entries },
        sweeps,
        converged,
    })
}

/// Density `d²·č` of a projected matrix at `cell`.
pub fn corrected_density(c_proj: &CellMatrix, cell: BinIndex) -> f64 {
    let d = c_proj.d as f64;
    d * d * c_proj.get(cell.k, cell.l)
}

/// Projection of a growing count matrix that reuses the previous row and
/// column scalings as the starting point.
///
/// The projected matrix is always a diagonal rescaling of the current
/// pseudo-count matrix, renormalized to total mass one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WarmProjector {
    d: usize,
    options: SinkhornOptions,
    row: Vec<f64>,
    col: Vec<f64>,
    total: f64,
    version: Option<u64>,
    last_sweeps: usize,
    #[serde(skip)]
    scratch: Vec<f64>,
    #[serde(skip)]
    work: Vec<f64>,
}

impl WarmProjector {
    pub fn new(d: usize, options: SinkhornOptions) -> Self {
        Self {
            d,
            options,
            row: vec![1.0; d],
            col: vec![1.0; d],
            total: 1.0,
            version: None,
            last_sweeps: 0,
            scratch: Vec::new(),
            work: Vec::new(),
        }
    }

    /// Re-projects if the counts changed since the last call. `version`
    /// must change whenever `counts` does.
    pub fn refresh_versioned(&mut self, counts: &[f64], c0: f64, version: u64) {
        if self.version == Some(version) {
            return;
        }
        self.scratch.clear();
        self.scratch.extend(counts.iter().map(|b| b + c0));
        let mut scaling = Scaling {
            d: self.d,
            row: &mut self.row,
            col: &mut self.col,
            work: &mut self.work,
        };
        let (sweeps, total, _) = scaling.run(&self.scratch, &self.options);
        self.total = total;
        self.last_sweeps = sweeps;
        self.version = Some(version);
    }

    /// Corrected density `d²·č` at the flat cell index.
    pub fn density(&self, counts: &[f64], c0: f64, idx: usize) -> f64 {
        let (k, l) = (idx / self.d, idx % self.d);
        let d = self.d as f64;
        d * d * self.row[k] * (counts[idx] + c0) * self.col[l] / self.total
    }

    pub fn last_sweeps(&self) -> usize {
        self.last_sweeps
    }
}
