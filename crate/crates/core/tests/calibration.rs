use seqrank::calibration::{
    builtin, builtin_threshold, calibrate, fingerprint, simulate_null_maxima, CalibrationTable, TABLE_VERSION,
};
use seqrank::engine::ModelConfig;
use seqrank::session::{Session, SessionConfig, Threshold};
use seqrank::Error;

fn small_model() -> ModelConfig {
    let mut model = ModelConfig::default();
    model.aggregation.depths = vec![2, 4];
    model.aggregation.weights = vec![0.5, 0.5];
    model
}

#[test]
fn bundled_tables_cover_the_default_model() {
    let model = ModelConfig::default();
    for alpha in [0.01, 0.05, 0.1] {
        let table = builtin().iter().find(|t| t.matches(&model, alpha)).expect("bundled table");
        assert_eq!(table.version, TABLE_VERSION);
        assert!(table.reps >= 20_000 && table.warning.is_none());
        let values: Vec<f64> = table.entries.iter().map(|e| e.threshold).collect();
        assert!(values.iter().all(|&l| (1.0..=1.0 / alpha).contains(&l)));
        assert!(values.windows(2).all(|w| w[0] <= w[1]), "{values:?}");
        for e in &table.entries {
            assert!(e.ville_crossing <= alpha + 3.0 * (alpha * (1.0 - alpha) / table.reps as f64).sqrt());
            assert!(e.p_cdf.windows(2).all(|w| w[0].fraction <= w[1].fraction));
            assert_eq!(e.p_cdf.last().unwrap().fraction, 1.0);
        }
    }
    let l512 = builtin_threshold(&model, 0.05, 512).unwrap();
    assert!((l512 / 16.9 - 1.0).abs() < 0.1, "{l512}");
}

#[test]
fn calibrated_sessions_use_the_bundled_threshold() {
    let config = SessionConfig {
        threshold: Threshold::Calibrated { horizon: 512 },
        ..SessionConfig::default()
    };
    let s = Session::new(config.clone()).unwrap();
    assert_eq!(s.threshold(), builtin_threshold(&ModelConfig::default(), 0.05, 512).unwrap());
    assert_eq!(s.budget(), Some(512));

    let untabulated = SessionConfig {
        threshold: Threshold::Calibrated { horizon: 1000 },
        ..SessionConfig::default()
    };
    assert!(matches!(Session::new(untabulated), Err(Error::Config(_))));
    let other_model = SessionConfig {
        model: small_model(),
        ..config.clone()
    };
    assert!(matches!(Session::new(other_model), Err(Error::Config(_))));
    let too_long = SessionConfig {
        max_n: Some(600),
        ..config
    };
    assert!(matches!(Session::new(too_long), Err(Error::Config(_))));
}

#[test]
fn thresholds_are_conservative_order_statistics() {
    let model = small_model();
    let reps = 400;
    let horizons = [20, 60];
    let maxima = simulate_null_maxima(&model, &horizons, reps, 11).unwrap();
    let table = calibrate(&model, 0.1, &horizons, reps, 11).unwrap();
    for (j, e) in table.entries.iter().enumerate() {
        let mut col: Vec<f64> = maxima.iter().map(|r| r[j].exp()).collect();
        col.sort_by(f64::total_cmp);
        // 360th smallest of 400
        let want = col[359].clamp(1.0, 10.0);
        assert!((e.threshold / want - 1.0).abs() < 1e-12);
        let above = col.iter().filter(|&&m| m >= e.threshold).count();
        assert!(above as f64 <= 0.1 * reps as f64 + 1.0);
    }
    assert_eq!(table, calibrate(&model, 0.1, &horizons, reps, 11).unwrap());
    assert_ne!(table, calibrate(&model, 0.1, &horizons, reps, 12).unwrap());
}

#[test]
fn tables_round_trip_and_check_versions() {
    let model = small_model();
    let table = calibrate(&model, 0.05, &[10, 30], 50, 3).unwrap();
    assert!(table.warning.is_some());
    assert_eq!(table.fingerprint, fingerprint(&model));
    assert_ne!(table.fingerprint, fingerprint(&ModelConfig::default()));
    let back = CalibrationTable::from_json(&table.to_json()).unwrap();
    assert_eq!(back, table);
    let mut old = table.clone();
    old.version = TABLE_VERSION + 1;
    assert!(CalibrationTable::from_json(&old.to_json()).is_err());
    assert!(calibrate(&model, 0.05, &[30, 10], 50, 3).is_err());
    assert!(calibrate(&model, 1.5, &[10], 50, 3).is_err());
}
