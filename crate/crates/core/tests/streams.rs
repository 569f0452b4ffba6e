use proptest::prelude::*;
use seqrank::engine::{Method, ModelConfig};
use seqrank::rank::{batch_ranks, RankPair, RankState};
use seqrank::session::{Decision, Session, SessionConfig, StepReport, TiePolicy};
use seqrank::sim::{Scenario, ScenarioSpec};
use seqrank::Error;

fn configs() -> Vec<SessionConfig> {
    vec![
        SessionConfig::default(),
        SessionConfig {
            model: ModelConfig {
                derandomize: false,
                ..ModelConfig::default()
            },
            seed: 3,
            ..SessionConfig::default()
        },
        SessionConfig {
            model: ModelConfig {
                method: Method::Seqbet,
                ..ModelConfig::default()
            },
            ..SessionConfig::default()
        },
    ]
}

fn run(config: &SessionConfig, data: &[(f64, f64)]) -> Vec<StepReport> {
    let mut s = Session::new(config.clone()).unwrap();
    let mut out = Vec::new();
    for &(x, y) in data {
        if s.is_stopped() {
            break;
        }
        out.push(s.observe(x, y).unwrap());
    }
    out
}

fn stream(scenario: Scenario, noise: u32, seed: u64, n: usize) -> Vec<(f64, f64)> {
    ScenarioSpec::new(scenario, noise, seed).unwrap().generator(0).take(n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ranks_match_naive_counts(values in prop::collection::vec(-20i32..20, 1..300)) {
        let mut state = RankState::new();
        for (i, &v) in values.iter().enumerate() {
            let x = v as f64 / 4.0;
            let got = state.insert_and_rank(x).unwrap();
            let seen = &values[..=i];
            prop_assert_eq!(got, RankPair {
                at_or_below: seen.iter().filter(|&&w| w <= v).count() as u64,
                below: seen.iter().filter(|&&w| w < v).count() as u64,
                n: i as u64 + 1,
            });
        }
        let batch = batch_ranks(&values.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
        for (b, &v) in batch.iter().zip(&values) {
            prop_assert_eq!(b.at_or_below, values.iter().filter(|&&w| w <= v).count() as u64);
        }
    }

    #[test]
    fn reports_invariant_under_increasing_maps(seed in 0u64..1000, noise in 1u32..=10, which in 0usize..3) {
        let data = stream(Scenario::Parabolic, noise, seed, 300);
        let warped: Vec<(f64, f64)> = data.iter().map(|&(x, y)| (8.0 * x.exp(), y.powi(3) + y)).collect();
        let config = &configs()[which];
        prop_assert_eq!(run(config, &data), run(config, &warped));
    }

    #[test]
    fn snapshot_resume_is_seamless(seed in 0u64..1000, split in 0usize..250, which in 0usize..3) {
        let data = stream(Scenario::Circular, 6, seed, 250);
        let config = &configs()[which];
        let full = run(config, &data);
        prop_assume!(split < full.len());
        let mut s = Session::new(config.clone()).unwrap();
        for &(x, y) in &data[..split] {
            s.observe(x, y).unwrap();
        }
        let mut r = Session::restore(&s.snapshot()).unwrap();
        let rest: Vec<StepReport> = data[split..full.len()].iter().map(|&(x, y)| r.observe(x, y).unwrap()).collect();
        prop_assert_eq!(&rest[..], &full[split..]);
    }

    #[test]
    fn p_values_monotone_and_decisions_sticky(seed in 0u64..1000, noise in 1u32..=10) {
        let data = stream(Scenario::Linear, noise, seed, 400);
        for config in configs() {
            let reports = run(&config, &data);
            for w in reports.windows(2) {
                prop_assert!(w[1].p_value <= w[0].p_value);
                prop_assert_eq!(w[0].decision, Decision::Continue);
            }
            for r in &reports {
                prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
                let max = reports.iter().take(r.n as usize).map(|q| q.aggregate_log10).fold(0.0, f64::max);
                prop_assert!((r.p_value - 10f64.powf(-max).min(1.0)).abs() <= 1e-9 * r.p_value.max(1e-300));
            }
        }
    }
}

#[test]
fn reject_stops_the_session() {
    let data = stream(Scenario::Linear, 1, 1, 2000);
    let mut s = Session::new(SessionConfig::default()).unwrap();
    let mut last = None;
    for &(x, y) in &data {
        let r = s.observe(x, y).unwrap();
        if r.decision == Decision::Reject {
            last = Some(r);
            break;
        }
    }
    let last = last.expect("strong dependence is detected");
    assert!(last.aggregate_log10 >= 20f64.log10());
    assert!(matches!(s.observe(0.5, 0.5), Err(Error::ObserveAfterStop(_))));
}

#[test]
fn discrete_data_with_randomized_paths() {
    let data: Vec<(f64, f64)> = stream(Scenario::Linear, 3, 4, 600)
        .into_iter()
        .map(|(x, y)| ((x * 5.0).floor(), (y * 5.0).floor()))
        .collect();
    let mut strict = Session::new(SessionConfig::default()).unwrap();
    let mut tie_error = None;
    for &(x, y) in &data {
        if let Err(e) = strict.observe(x, y) {
            tie_error = Some(e);
            break;
        }
    }
    assert!(matches!(tie_error, Some(Error::TiesPresent(_))));

    let config = SessionConfig {
        model: ModelConfig {
            derandomize: false,
            ..ModelConfig::default()
        },
        tie_policy: TiePolicy::RandomizedPaths { paths: 10 },
        seed: 8,
        ..SessionConfig::default()
    };
    let reports = run(&config, &data);
    assert_eq!(reports.last().unwrap().decision, Decision::Reject);
}
