//! Streaming test session: ranks, test paths, decision rule and snapshots.
//!
//! The session only stops on events of the rank filtration. Any external
//! stopping rule that looks at the raw observations themselves (rather than
//! at the reported e-process) voids the type-I guarantee.

use serde::{Deserialize, Serialize};

use crate::derandomize::{merge_log_maxima, MergeMethod};
use crate::engine::{ModelConfig, PathEngine};
use crate::error::{Error, Result};
use crate::rank::{check_finite, RankState};
use crate::rng::CounterRng;

pub const SNAPSHOT_VERSION: u32 = 1;

/// What to do with tied observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TiePolicy {
    /// Refuse ties; required for derandomized sessions.
    #[default]
    Error,
    /// One randomized path with externally randomized ranks.
    SingleRandomized,
    /// `paths` independent randomized paths with merged p-values.
    RandomizedPaths { paths: usize },
}

impl TiePolicy {
    pub fn paths(&self) -> usize {
        match self {
            TiePolicy::Error | TiePolicy::SingleRandomized => 1,
            TiePolicy::RandomizedPaths { paths } => *paths,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    /// Reject once the e-process reaches `1/α`.
    #[default]
    Ville,
    Fixed { value: f64 },
    /// Truncated test with the tabulated threshold for horizon `horizon`.
    Calibrated { horizon: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub alpha: f64,
    pub model: ModelConfig,
    pub threshold: Threshold,
    pub max_n: Option<u64>,
    pub seed: u64,
    pub tie_policy: TiePolicy,
    pub merge: MergeMethod,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            model: ModelConfig::default(),
            threshold: Threshold::Ville,
            max_n: None,
            seed: 0,
            tie_policy: TiePolicy::Error,
            merge: MergeMethod::Arithmetic,
        }
    }
}

impl SessionConfig {
    /// Validates the configuration and returns the rejection threshold and
    /// the effective budget.
    pub fn resolve(&self) -> Result<(f64, Option<u64>)> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.model.validate()?;
        if self.model.derandomize && self.tie_policy != TiePolicy::Error {
            return Err(Error::Config(
                "randomized tie policies need derandomize = false".into(),
            ));
        }
        if let TiePolicy::RandomizedPaths { paths } = self.tie_policy {
            if paths == 0 {
                return Err(Error::Config("need at least one randomized path".into()));
            }
        }
        if self.max_n == Some(0) {
            return Err(Error::Config("max_n must be positive".into()));
        }
        match self.threshold {
            Threshold::Ville => Ok((1.0 / self.alpha, self.max_n)),
            Threshold::Fixed { value } => {
                if !(value >= 1.0 && value.is_finite()) {
                    return Err(Error::Config(format!("threshold must be at least 1, got {value}")));
                }
                Ok((value, self.max_n))
            }
            Threshold::Calibrated { horizon } => {
                if self.max_n.is_some_and(|m| m > horizon) {
                    return Err(Error::Config(format!(
                        "max_n exceeds the calibrated horizon {horizon}"
                    )));
                }
                let value = crate::calibration::builtin_threshold(&self.model, self.alpha, horizon)?;
                Ok((value, Some(self.max_n.unwrap_or(horizon))))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Reject,
    BudgetExhausted,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Continue => "continue",
            Decision::Reject => "reject",
            Decision::BudgetExhausted => "budget_exhausted",
        }
    }
}

/// Outcome of one observation. Martingale values are base-10 logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub n: u64,
    pub per_depth_log10: Vec<f64>,
    pub aggregate_log10: f64,
    /// Anytime-valid p-value, non-increasing in `n`.
    pub p_value: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TestPath {
    engine: PathEngine,
    rng: Option<CounterRng>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    config: SessionConfig,
    threshold: f64,
    budget: Option<u64>,
    rank_x: RankState,
    rank_y: RankState,
    paths: Vec<TestPath>,
    n: u64,
    decision: Decision,
    p_value: f64,
}

#[derive(Serialize)]
struct SnapshotOut<'a> {
    version: u32,
    session: &'a Session,
}

#[derive(Deserialize)]
struct SnapshotHeader {
    version: u32,
}

#[derive(Deserialize)]
struct SnapshotIn {
    session: Session,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Self> {
        let (threshold, budget) = config.resolve()?;
        let randomized = !config.model.derandomize;
        let paths = (0..config.tie_policy.paths())
            .map(|b| {
                Ok(TestPath {
                    engine: PathEngine::new(&config.model)?,
                    rng: randomized.then(|| CounterRng::new(config.seed, b as u64)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            threshold,
            budget,
            rank_x: RankState::new(),
            rank_y: RankState::new(),
            paths,
            n: 0,
            decision: Decision::Continue,
            p_value: 1.0,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Rejection threshold on the e-process scale.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn decision(&self) -> Decision {
        self.decision
    }

    pub fn is_stopped(&self) -> bool {
        self.decision != Decision::Continue
    }

    pub fn p_value(&self) -> f64 {
        self.p_value
    }

    pub fn depths(&self) -> Vec<usize> {
        self.paths[0].engine.depths()
    }

    /// Natural log of the aggregate e-process (averaged over randomized paths).
    pub fn log_m(&self) -> f64 {
        log_mean_exp(self.paths.iter().map(|p| p.engine.log_m()))
    }

    fn per_depth_log_m(&self) -> Vec<f64> {
        if self.paths.len() == 1 {
            return self.paths[0].engine.per_depth_log_m();
        }
        let per_path: Vec<Vec<f64>> = self.paths.iter().map(|p| p.engine.per_depth_log_m()).collect();
        (0..per_path[0].len())
            .map(|j| log_mean_exp(per_path.iter().map(|v| v[j])))
            .collect()
    }

    /// Feeds one observation pair through the full pipeline.
    ///
    /// On error the session is left unchanged.
    pub fn observe(&mut self, x: f64, y: f64) -> Result<StepReport> {
        if self.is_stopped() {
            return Err(Error::ObserveAfterStop(self.n));
        }
        check_finite(x)?;
        check_finite(y)?;
        if self.config.model.derandomize && (self.rank_x.at(x) > 0 || self.rank_y.at(y) > 0) {
            return Err(Error::TiesPresent(format!(
                "observation {} repeats an earlier value; derandomized tests need continuous data, \
                 use a randomized tie policy (single or paths) for discrete data",
                self.n + 1
            )));
        }
        let px = self.rank_x.insert_and_rank(x)?;
        let py = self.rank_y.insert_and_rank(y)?;
        for path in &mut self.paths {
            let uv = path.rng.as_mut().map(|r| (r.uniform_open(), r.uniform_open()));
            path.engine.step(&px, &py, (x, y), uv)?;
        }
        self.n += 1;
        Ok(self.conclude())
    }

    fn conclude(&mut self) -> StepReport {
        let log_m = self.log_m();
        let reject = if self.paths.len() == 1 {
            let engine = &self.paths[0].engine;
            self.p_value = (-engine.running_max_log()).exp().min(1.0);
            engine.log_m() >= self.threshold.ln()
        } else {
            let maxima: Vec<f64> = self.paths.iter().map(|p| p.engine.running_max_log()).collect();
            let merged = merge_log_maxima(&maxima, self.config.merge).expect("paths are non-empty");
            self.p_value = merged.value().min(self.p_value);
            merged.raw <= 1.0 / self.threshold
        };
        self.decision = if reject {
            Decision::Reject
        } else if self.budget.is_some_and(|b| self.n >= b) {
            Decision::BudgetExhausted
        } else {
            Decision::Continue
        };
        StepReport {
            n: self.n,
            per_depth_log10: self.per_depth_log_m().iter().map(|l| l / std::f64::consts::LN_10).collect(),
            aggregate_log10: log_m / std::f64::consts::LN_10,
            p_value: self.p_value,
            decision: self.decision,
        }
    }

    /// Versioned JSON snapshot of the complete state.
    pub fn snapshot(&self) -> Vec<u8> {
        serde_json::to_vec(&SnapshotOut {
            version: SNAPSHOT_VERSION,
            session: self,
        })
        .expect("session state is serializable")
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let header: SnapshotHeader =
            serde_json::from_slice(bytes).map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
        if header.version != SNAPSHOT_VERSION {
            return Err(Error::SnapshotVersion {
                found: header.version,
                expected: SNAPSHOT_VERSION,
            });
        }
        let SnapshotIn { session } =
            serde_json::from_slice(bytes).map_err(|e| Error::CorruptSnapshot(e.to_string()))?;
        if session.rank_x.len() != session.n
            || session.rank_y.len() != session.n
            || session.paths.is_empty()
            || session.paths.iter().any(|p| p.engine.n() != session.n)
        {
            return Err(Error::CorruptSnapshot("inconsistent observation counts".into()));
        }
        Ok(session)
    }
}

fn log_mean_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() == 1 {
        return v[0];
    }
    crate::aggregate::log_sum_exp(&v) - (v.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Method;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dependent_stream(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: f64 = rng.random();
                let e: f64 = rng.sample(StandardNormal);
                (x, x + 0.3 * e)
            })
            .collect()
    }

    #[test]
    fn fresh_session_and_first_step() {
        let mut s = Session::new(SessionConfig::default()).unwrap();
        assert_eq!(s.log_m(), 0.0);
        let r = s.observe(0.1, 0.2).unwrap();
        assert_eq!(r.aggregate_log10, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.decision, Decision::Continue);
    }

    #[test]
    fn config_errors() {
        for alpha in [0.0, 1.0, -0.1, f64::NAN] {
            let cfg = SessionConfig {
                alpha,
                ..SessionConfig::default()
            };
            assert!(matches!(Session::new(cfg), Err(Error::Config(_))));
        }
        let cfg = SessionConfig {
            tie_policy: TiePolicy::RandomizedPaths { paths: 4 },
            ..SessionConfig::default()
        };
        assert!(matches!(Session::new(cfg), Err(Error::Config(_))));
        let cfg = SessionConfig {
            threshold: Threshold::Fixed { value: 0.5 },
            ..SessionConfig::default()
        };
        assert!(matches!(Session::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn ties_error_leaves_state_unchanged() {
        let mut s = Session::new(SessionConfig::default()).unwrap();
        s.observe(1.0, 2.0).unwrap();
        let before = s.snapshot();
        assert!(matches!(s.observe(1.0, 3.0), Err(Error::TiesPresent(_))));
        assert!(matches!(s.observe(f64::NAN, 3.0), Err(Error::InvalidObservation(_))));
        assert_eq!(s.snapshot(), before);
    }

    #[test]
    fn rejection_is_sticky_and_p_monotone() {
        let mut s = Session::new(SessionConfig::default()).unwrap();
        let mut last_p = 1.0;
        let mut stopped_at = None;
        for (x, y) in dependent_stream(2000, 1) {
            let r = s.observe(x, y).unwrap();
            assert!(r.p_value <= last_p);
            last_p = r.p_value;
            if r.decision == Decision::Reject {
                assert!(r.aggregate_log10 >= 20f64.log10());
                stopped_at = Some(r.n);
                break;
            }
        }
        let n = stopped_at.expect("strong dependence is detected");
        assert!(last_p <= 0.05);
        assert!(matches!(s.observe(0.5, 0.5), Err(Error::ObserveAfterStop(m)) if m == n));
    }

    #[test]
    fn budget_exhaustion() {
        let cfg = SessionConfig {
            max_n: Some(20),
            ..SessionConfig::default()
        };
        let mut s = Session::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut last = None;
        for _ in 0..20 {
            last = Some(s.observe(rng.random(), rng.random()).unwrap());
        }
        assert_eq!(last.unwrap().decision, Decision::BudgetExhausted);
        assert!(s.observe(0.1, 0.1).is_err());
    }

    fn replay(cfg: &SessionConfig, data: &[(f64, f64)], cut: usize) -> (Vec<StepReport>, Vec<StepReport>) {
        let mut whole = Session::new(cfg.clone()).unwrap();
        let straight: Vec<StepReport> = data.iter().map(|&(x, y)| whole.observe(x, y).unwrap()).collect();
        let mut first = Session::new(cfg.clone()).unwrap();
        let mut resumed: Vec<StepReport> = data[..cut].iter().map(|&(x, y)| first.observe(x, y).unwrap()).collect();
        let mut second = Session::restore(&first.snapshot()).unwrap();
        resumed.extend(data[cut..].iter().map(|&(x, y)| second.observe(x, y).unwrap()));
        (straight, resumed)
    }

    #[test]
    fn snapshot_restore_is_bit_identical() {
        let data = dependent_stream(150, 4).into_iter().map(|(x, y)| (x, y * 0.05 + x)).collect::<Vec<_>>();
        let weak: Vec<(f64, f64)> = dependent_stream(150, 5)
            .into_iter()
            .map(|(x, y)| (x, y + 3.0 * x.sin()))
            .collect();
        let configs = [
            SessionConfig::default(),
            SessionConfig {
                model: ModelConfig {
                    derandomize: false,
                    ..ModelConfig::default()
                },
                tie_policy: TiePolicy::RandomizedPaths { paths: 3 },
                seed: 17,
                ..SessionConfig::default()
            },
            SessionConfig {
                model: ModelConfig {
                    method: Method::Seqbet,
                    derandomize: false,
                    ..ModelConfig::default()
                },
                threshold: Threshold::Fixed { value: 1e300 },
                ..SessionConfig::default()
            },
        ];
        for cfg in &configs {
            for d in [&data, &weak] {
                let cfg = SessionConfig {
                    threshold: Threshold::Fixed { value: 1e300 },
                    ..cfg.clone()
                };
                let (a, b) = replay(&cfg, d, 100);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn snapshot_errors_and_size() {
        let mut s = Session::new(SessionConfig::default()).unwrap();
        for (x, y) in dependent_stream(30, 6) {
            s.observe(x, y).unwrap();
        }
        let snap = s.snapshot();
        assert!(matches!(
            Session::restore(&snap[..snap.len() / 2]),
            Err(Error::CorruptSnapshot(_))
        ));
        let text = String::from_utf8(snap.clone()).unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            Session::restore(text.as_bytes()),
            Err(Error::SnapshotVersion { found: 9, expected: 1 })
        ));
        let mut big = Session::new(SessionConfig {
            threshold: Threshold::Fixed { value: 1e300 },
            ..SessionConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5000 {
            big.observe(rng.sample(StandardNormal), rng.sample(StandardNormal)).unwrap();
        }
        let per_obs = big.snapshot().len() as f64 / 5000.0;
        assert!(per_obs < 64.0, "{per_obs} bytes per observation");
    }

    #[test]
    fn randomized_paths_handle_ties() {
        let cfg = SessionConfig {
            model: ModelConfig {
                derandomize: false,
                ..ModelConfig::default()
            },
            tie_policy: TiePolicy::RandomizedPaths { paths: 10 },
            ..SessionConfig::default()
        };
        let mut s = Session::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut last = None;
        for _ in 0..600 {
            let x = rng.random_range(0..4) as f64;
            let y = if rng.random::<f64>() < 0.7 { x } else { rng.random_range(0..4) as f64 };
            last = Some(s.observe(x, y).unwrap());
            if s.is_stopped() {
                break;
            }
        }
        assert_eq!(last.unwrap().decision, Decision::Reject);
    }
}
