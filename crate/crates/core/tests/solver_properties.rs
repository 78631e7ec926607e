use magcal::math::skew;
use magcal::metrics::{apply_calibration, field_magnitude_std};
use magcal::model::{build_windows, residual, Aggregator, CalibrationState, FactorWindow};
use magcal::sim::{generate, preset, Preset, TruthParams};
use magcal::solver::{final_estimate, minimize, objective, solve_batch, IncrementalEstimator, SolverConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn truth_state(t: &TruthParams) -> CalibrationState {
    CalibrationState::from_physical(&t.soft_iron(), &t.pseudo_hard_iron(), &t.gyro_bias()).unwrap()
}

fn wam_windows(seed: u64, noise_free: bool) -> Vec<FactorWindow> {
    let mut spec = preset(Preset::Wam).with_seed(seed);
    if noise_free {
        spec = spec.noise_free();
    }
    let ds = generate(&spec).unwrap();
    build_windows(&ds.samples, 10, Aggregator::Median).unwrap()
}

/// Single-sample windows with the exact field derivative `−A [w]× m_t`.
fn exact_windows(truth: &TruthParams, seed: u64) -> Vec<FactorWindow> {
    let ds = generate(&preset(Preset::Wam).with_seed(seed).with_truth(*truth).noise_free()).unwrap();
    let a = truth.soft_iron();
    let a_inv = a.try_inverse().unwrap();
    ds.samples
        .iter()
        .zip(&ds.truth_body_rates)
        .map(|(s, w)| {
            let m_t = a_inv * s.mag - truth.pseudo_hard_iron();
            FactorWindow {
                m: s.mag,
                m_dot: -(a * skew(w) * m_t),
                w: s.gyro,
                t_mid: s.t,
                count: 1,
            }
        })
        .collect()
}

#[test]
fn residual_and_objective_vanish_at_truth() {
    let truth = TruthParams::reference();
    let x = truth_state(&truth);
    let windows = exact_windows(&truth, 40);
    let (_, c) = magcal::model::expand_cholesky(&x.l).unwrap();
    let typical = windows.iter().map(|w| (c.matrix() * w.m_dot).norm()).sum::<f64>() / windows.len() as f64;
    let worst = windows
        .iter()
        .map(|w| residual(&x, w).unwrap().norm())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6 * typical, "{worst} vs {typical}");
    assert!(objective(&x, &windows, &SolverConfig::batch()).unwrap() < 1e-10);
    // a miscalibrated state sees the distortion
    assert!(windows
        .iter()
        .all(|w| residual(&CalibrationState::identity(), w).unwrap().norm() > 0.0));
}

#[test]
fn aggregated_windows_leave_a_small_residual_at_truth() {
    let truth = TruthParams::reference();
    let x = truth_state(&truth);
    let (_, c) = magcal::model::expand_cholesky(&x.l).unwrap();
    let rel: Vec<f64> = wam_windows(40, true)
        .iter()
        .map(|w| residual(&x, w).unwrap().norm() / (c.matrix() * w.m_dot).norm().max(1.0))
        .collect();
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    assert!(mean < 0.02, "{mean}");
}

#[test]
fn identity_data_stays_at_identity() {
    let spec = preset(Preset::Wam)
        .with_seed(41)
        .with_truth(TruthParams::ideal())
        .noise_free();
    let ds = generate(&spec).unwrap();
    let windows = build_windows(&ds.samples, 10, Aggregator::Median).unwrap();
    let x0 = CalibrationState::identity();
    let out = minimize(&x0, &windows, &SolverConfig::batch()).unwrap();
    let d = out.state.to_vector() - x0.to_vector();
    assert!(d.fixed_rows::<5>(0).amax() < 1e-3, "{d}");
    assert!(d.fixed_rows::<3>(5).amax() < 1.0, "{d}");
    assert!(d.fixed_rows::<3>(8).amax() < 1e-4, "{d}");
}

#[test]
fn accepted_costs_never_increase() {
    for seed in 0..5 {
        let windows = wam_windows(50 + seed, false);
        let x0 = CalibrationState::identity();
        let cfg = SolverConfig::batch();
        let out = minimize(&x0, &windows, &cfg).unwrap();
        assert!(out.accepted_costs.windows(2).all(|c| c[1] <= c[0]));
        assert!(out.cost <= objective(&x0, &windows, &cfg).unwrap());
        assert!(out.converged);
    }
}

#[test]
fn window_order_does_not_matter() {
    let windows = wam_windows(60, false);
    let cfg = SolverConfig::batch();
    let x0 = CalibrationState::identity();
    let a = minimize(&x0, &windows, &cfg).unwrap().state.to_vector();
    let mut shuffled = windows.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(61));
    let b = minimize(&x0, &shuffled, &cfg).unwrap().state.to_vector();
    let rel = (a - b).component_div(&a.map(|v| v.abs().max(1.0))).amax();
    assert!(rel < 1e-9, "{rel:e}");
}

#[test]
fn tail_average_lands_in_the_batch_band() {
    let runs = 20;
    let mut stds = [0.0; 2];
    for seed in 0..runs {
        let ds = generate(&preset(Preset::Wam).with_seed(seed)).unwrap();
        let held_out = generate(&preset(Preset::Wam).with_seed(seed + 1_000_000)).unwrap();
        let mags: Vec<_> = held_out.samples.iter().map(|s| s.mag).collect();
        let windows = build_windows(&ds.samples, 10, Aggregator::Median).unwrap();
        let batch = solve_batch(&windows, &SolverConfig::batch(), &CalibrationState::identity()).unwrap();
        let mut est = IncrementalEstimator::new(SolverConfig::incremental()).unwrap();
        for w in windows {
            est.add(w).unwrap();
        }
        let tail = final_estimate(&est, 0.2).unwrap();
        for (k, r) in [&batch, &tail].into_iter().enumerate() {
            stds[k] += field_magnitude_std(&apply_calibration(r, &mags)).unwrap() / runs as f64;
            assert!((r.soft_iron.det() - 1.0).abs() < 1e-9);
        }
    }
    for std in stds {
        assert!(std > 9.668 * 0.7 && std < 9.668 * 1.3, "{stds:?}");
    }
}

#[test]
fn history_tracks_updates_and_stays_finite() {
    let windows = wam_windows(63, false);
    let mut est = IncrementalEstimator::new(SolverConfig::incremental()).unwrap();
    for (k, w) in windows.into_iter().take(50).enumerate() {
        let report = est.add(w).unwrap();
        assert!(report.iterations <= 10);
        assert_eq!(est.history().len(), k + 1);
        assert!(est.state().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn batch_objective_improves_on_random_starts(seed in 0u64..1000, l in prop::array::uniform5(-0.2f64..0.2)) {
        let windows = wam_windows(seed, false);
        let mut x0 = CalibrationState::identity();
        x0.l = l.into();
        let cfg = SolverConfig::batch();
        let out = minimize(&x0, &windows, &cfg).unwrap();
        prop_assert!(out.cost <= objective(&x0, &windows, &cfg).unwrap());
        let (_, c) = magcal::model::expand_cholesky(&out.state.l).unwrap();
        prop_assert!((c.det() - 1.0).abs() < 1e-9);
    }
}
