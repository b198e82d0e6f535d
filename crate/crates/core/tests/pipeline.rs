mod common;

use std::collections::HashSet;

use ldpkit::data::sample_balanced_priv;
use ldpkit::noise::Mechanism;
use ldpkit::oracle::LabelOracle;
use ldpkit::seed::SeedTriple;
use ldpkit::transfer::{
    calibrate_epsilon, default_band, generalization_trend, run_pipeline, run_pipeline_detailed, PipelineConfig,
};
use ldpkit::Error;

fn quick_config(mechanism: Mechanism, epsilon: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(mechanism, epsilon, 20, 200);
    cfg.local_hidden = vec![16];
    cfg.train.epochs = 3;
    cfg.seeds = SeedTriple::from_master(9, 0);
    cfg.query_batch = 64;
    cfg
}

#[test]
fn reruns_are_identical() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    for mech in [Mechanism::Sup, Mechanism::Rand] {
        let cfg = quick_config(mech, 2.0);
        let a = run_pipeline(&cfg, &d_priv, &lab.val, &lab.oracle).unwrap();
        let b = run_pipeline(&cfg, &d_priv, &lab.val, &lab.oracle).unwrap();
        assert!(a.same_outcome(&b), "{a:?} vs {b:?}");
        assert_eq!(a.query_count, 200);
    }
}

#[test]
fn different_seeds_change_the_run() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    let a = quick_config(Mechanism::Rand, 2.0);
    let b = PipelineConfig {
        seeds: SeedTriple::from_master(9, 1),
        ..a.clone()
    };
    let ra = run_pipeline_detailed(&a, &d_priv, &lab.val, &lab.oracle).unwrap();
    let rb = run_pipeline_detailed(&b, &d_priv, &lab.val, &lab.oracle).unwrap();
    assert_ne!(ra.protected[0].pixels(), rb.protected[0].pixels());
}

#[test]
fn oracle_only_sees_noised_pixels() {
    let mut lab = common::small_lab();
    lab.oracle.enable_audit();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 4).unwrap();
    let clean: HashSet<Vec<u64>> = d_priv
        .images()
        .iter()
        .map(|im| im.pixels().iter().map(|p| p.to_bits()).collect())
        .collect();
    for mech in [Mechanism::Sup, Mechanism::Rand] {
        run_pipeline(&quick_config(mech, 1.0), &d_priv, &lab.val, &lab.oracle).unwrap();
    }
    let log = lab.oracle.drain_audit_records().unwrap();
    assert_eq!(log.len(), 2 * (20 + 200));
    assert_eq!(lab.oracle.query_count(), log.len() as u64);
    for r in &log {
        let bits: Vec<u64> = r.pixels.iter().map(|p| p.to_bits()).collect();
        assert!(!clean.contains(&bits), "query {} matched a clean image", r.index);
        assert!(r.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
    let indices: Vec<u64> = log.iter().map(|r| r.index).collect();
    assert_eq!(indices, (0..log.len() as u64).collect::<Vec<_>>());
}

#[test]
fn oversized_query_budget_is_a_config_error() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    let cfg = PipelineConfig::new(Mechanism::Sup, 1.0, 20, 20 * 19 + 1);
    let err = run_pipeline(&cfg, &d_priv, &lab.val, &lab.oracle).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "config", .. }), "{err}");
}

#[test]
fn bad_epsilon_is_rejected() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    for eps in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        let cfg = PipelineConfig::new(Mechanism::Rand, eps, 20, 10);
        assert!(run_pipeline(&cfg, &d_priv, &lab.val, &lab.oracle).is_err(), "eps {eps}");
    }
}

#[test]
fn calibration_rejects_bad_inputs() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    let band = default_band(5);
    assert!(matches!(
        calibrate_epsilon(&lab.oracle, &d_priv, band, &[], 0),
        Err(Error::Size(_))
    ));
    assert!(matches!(
        calibrate_epsilon(&lab.oracle, &d_priv, band, &[1.0, 2.0], 0),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        calibrate_epsilon(&lab.oracle, &d_priv, (0.6, 0.4), &[1.0], 0),
        Err(Error::Validation(_))
    ));
}

#[test]
fn calibration_reports_unreachable_band() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    // At these budgets the images are nearly uniform noise, so perfect accuracy is out of reach.
    let err = calibrate_epsilon(&lab.oracle, &d_priv, (0.999, 1.0), &[0.02, 0.01], 0).unwrap_err();
    match err {
        Error::Calibration { measured, .. } => assert_eq!(measured.len(), 2),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn calibration_picks_smallest_epsilon_in_band() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    let grid = [50.0, 10.0, 3.0, 1.0, 0.3, 0.1];
    let cal = calibrate_epsilon(&lab.oracle, &d_priv, (0.0, 1.0), &grid, 7).unwrap();
    assert_eq!(cal.epsilon, 0.1);
    assert_eq!(cal.measured.len(), grid.len());
    assert!((0.0..=1.0).contains(&cal.band_position));
}

#[test]
fn trend_needs_three_epsilons() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    let base = quick_config(Mechanism::Sup, 1.0);
    let seeds = [SeedTriple::from_master(1, 0)];
    let err = generalization_trend(&base, &[1.0, 2.0], &seeds, &d_priv, &lab.val, &lab.oracle).unwrap_err();
    assert!(matches!(err, Error::Size(_)));
}

#[test]
fn trend_with_one_seed_is_low_confidence() {
    let lab = common::small_lab();
    let d_priv = sample_balanced_priv(&lab.pool, 20, 1).unwrap();
    let base = quick_config(Mechanism::Sup, 1.0);
    let seeds = [SeedTriple::from_master(1, 0)];
    let t = generalization_trend(&base, &[0.5, 1.0, 4.0], &seeds, &d_priv, &lab.val, &lab.oracle).unwrap();
    assert!(t.low_confidence);
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.reports.len(), 3);
    for row in &t.rows {
        assert!((row.gap - (row.acc_priv - row.acc_val)).abs() < 1e-12);
    }
}
