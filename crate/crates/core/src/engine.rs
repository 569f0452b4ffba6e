//! One test path: sequential rank pairs in, aggregate log e-process out.
//!
//! The engine does not own the rank structures, so the same code serves
//! real streams (ranks from [`crate::rank::RankState`]) and synthetic null
//! paths (ranks drawn directly, which is valid because sequential ranks of
//! independent continuous data are independent and uniform).

use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregatorConfig, AggregatorState};
use crate::bet::BetState;
use crate::derandomize::AxisWeights;
use crate::error::{Error, Result};
use crate::grid::GridState;
use crate::rank::RankPair;
use crate::sinkhorn::SinkhornOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Multi-depth grid martingales combined by the aggregator.
    #[default]
    Grid,
    /// Averaged cross-interaction martingales at a single depth.
    Seqbet,
}

/// Everything that determines the law of the e-process under the null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    pub aggregation: AggregatorConfig,
    pub sinkhorn: bool,
    pub sinkhorn_options: SinkhornOptions,
    pub derandomize: bool,
    /// Pseudo-count per cell.
    pub c0: f64,
    /// Observations before a depth starts betting; `None` uses the depth.
    pub activation: Option<u64>,
    /// Binary digits of the cross-interaction test (grid size `2^bits`).
    pub bet_bits: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: Method::Grid,
            aggregation: AggregatorConfig::default(),
            sinkhorn: true,
            sinkhorn_options: SinkhornOptions::default(),
            derandomize: true,
            c0: 1.0,
            activation: None,
            bet_bits: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.aggregation.validate()?;
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(Error::Config(format!("c0 must be positive, got {}", self.c0)));
        }
        if self.sinkhorn_options.max_iter == 0 || !(self.sinkhorn_options.tol_factor > 1.0) {
            return Err(Error::Config("sinkhorn needs max_iter ≥ 1 and tol_factor > 1".into()));
        }
        if self.method == Method::Seqbet && !(1..=crate::bet::MAX_BITS).contains(&self.bet_bits) {
            return Err(Error::Config(format!("bet_bits {} out of range", self.bet_bits)));
        }
        Ok(())
    }

    /// Largest number of observations any component buffers before betting.
    pub fn max_activation(&self) -> u64 {
        match self.method {
            Method::Grid => self
                .aggregation
                .depths
                .iter()
                .map(|&d| self.activation.unwrap_or(d as u64))
                .max()
                .unwrap_or(0),
            Method::Seqbet => self.activation.unwrap_or(1 << self.bet_bits),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Tester {
    Grid {
        grids: Vec<GridState>,
        aggregator: AggregatorState,
    },
    Seqbet {
        bet: BetState,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEngine {
    tester: Tester,
    derandomize: bool,
    n: u64,
    log_m: f64,
    max_log_m: f64,
    #[serde(skip)]
    log_f: Vec<f64>,
}

impl PathEngine {
    pub fn new(model: &ModelConfig) -> Result<Self> {
        model.validate()?;
        let tester = match model.method {
            Method::Grid => {
                let grids = model
                    .aggregation
                    .depths
                    .iter()
                    .map(|&d| {
                        let g = GridState::with_activation(d, model.c0, model.activation.unwrap_or(d as u64))?;
                        Ok(if model.sinkhorn {
                            g.with_sinkhorn(model.sinkhorn_options)
                        } else {
                            g
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Tester::Grid {
                    grids,
                    aggregator: AggregatorState::new(model.aggregation.clone())?,
                }
            }
            Method::Seqbet => {
                let bet = match model.activation {
                    Some(a) => BetState::with_activation(model.bet_bits, a)?,
                    None => BetState::new(model.bet_bits)?,
                };
                Tester::Seqbet { bet }
            }
        };
        Ok(Self {
            tester,
            derandomize: model.derandomize,
            n: 0,
            log_m: 0.0,
            max_log_m: 0.0,
            log_f: Vec::new(),
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Natural-log e-process.
    pub fn log_m(&self) -> f64 {
        self.log_m
    }

    /// Natural log of `max_{k≤n} M_k` (at least 0 since `M_0 = 1`).
    pub fn running_max_log(&self) -> f64 {
        self.max_log_m
    }

    /// Natural-log martingale of each depth (one entry for the interaction test).
    pub fn per_depth_log_m(&self) -> Vec<f64> {
        match &self.tester {
            Tester::Grid { aggregator, .. } => aggregator.per_depth_log_m().to_vec(),
            Tester::Seqbet { bet } => vec![bet.log_m()],
        }
    }

    /// Depth labels matching [`Self::per_depth_log_m`].
    pub fn depths(&self) -> Vec<usize> {
        match &self.tester {
            Tester::Grid { grids, .. } => grids.iter().map(|g| g.depth()).collect(),
            Tester::Seqbet { bet } => vec![bet.depth()],
        }
    }

    /// Advances by one observation and returns the log increment.
    ///
    /// `seed_point` is any pair with the same within-coordinate order as the
    /// raw observations (used for the batch-rank seeding at activation).
    /// `randomizers` must be given in randomized mode and is ignored when
    /// derandomizing.
    pub fn step(
        &mut self,
        px: &RankPair,
        py: &RankPair,
        seed_point: (f64, f64),
        randomizers: Option<(f64, f64)>,
    ) -> Result<f64> {
        let before = self.log_m;
        if self.derandomize {
            if px.is_tied() || py.is_tied() {
                return Err(Error::TiesPresent(format!(
                    "tied observation at n = {}; derandomized tests need continuous data",
                    px.n
                )));
            }
            match &mut self.tester {
                Tester::Grid { grids, aggregator } => {
                    self.log_f.clear();
                    for g in grids.iter_mut() {
                        let d = g.depth();
                        let wx = AxisWeights::from_rank(px, d);
                        let wy = AxisWeights::from_rank(py, d);
                        self.log_f.push(g.update_expected(&wx, &wy, seed_point));
                    }
                    self.log_m += aggregator.step(&self.log_f)?;
                }
                Tester::Seqbet { bet } => {
                    let d = bet.depth();
                    let wx = AxisWeights::from_rank(px, d);
                    let wy = AxisWeights::from_rank(py, d);
                    self.log_m = bet.update_expected(&wx, &wy, seed_point);
                }
            }
        } else {
            let (u, v) = randomizers.ok_or_else(|| {
                Error::InvalidInput("randomized path needs randomization variables".into())
            })?;
            let r = px.randomize(u)?;
            let s = py.randomize(v)?;
            match &mut self.tester {
                Tester::Grid { grids, aggregator } => {
                    self.log_f.clear();
                    for g in grids.iter_mut() {
                        self.log_f.push(g.update(r, s)?);
                    }
                    self.log_m += aggregator.step(&self.log_f)?;
                }
                Tester::Seqbet { bet } => {
                    self.log_m = bet.update(r, s)?;
                }
            }
        }
        self.n += 1;
        self.max_log_m = self.max_log_m.max(self.log_m);
        Ok(self.log_m - before)
    }
}
