use magcal::model::{build_windows, Aggregator};
use magcal::runner::{calibrate, Method, RunConfig};
use magcal::sim::{generate, preset, Preset};
use magcal::solver::{final_estimate, IncrementalEstimator, SolverConfig};
use magcal_ffi::*;

fn samples(seed: u64) -> (Vec<magcal::model::SensorSample>, Vec<MagcalSample>) {
    let ds = generate(&preset(Preset::Wam).with_seed(seed)).unwrap();
    let c = ds
        .samples
        .iter()
        .map(|s| MagcalSample {
            t: s.t,
            mag: s.mag.into(),
            gyro: s.gyro.into(),
        })
        .collect();
    (ds.samples, c)
}

#[test]
fn batch_matches_library() {
    let (rust, c) = samples(21);
    for (method, code) in [
        (Method::Bfg, MAGCAL_METHOD_BFG),
        (Method::Ifg, MAGCAL_METHOD_IFG),
        (Method::Ellipsoid, MAGCAL_METHOD_ELLIPSOID),
    ] {
        let mut out = MagcalCalibration::default();
        let status = unsafe { magcal_calibrate(c.as_ptr(), c.len(), code, 0, MAGCAL_AGGREGATOR_MEDIAN, &mut out) };
        assert_eq!(status, MagcalStatus::Ok);
        let lib = calibrate(&rust, &RunConfig::default().with_method(method)).unwrap().result;
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out.soft_iron[3 * i + j], lib.soft_iron.matrix()[(i, j)]);
            }
            assert_eq!(out.pseudo_hard_iron[i], lib.pseudo_hard_iron[i]);
        }
        assert_eq!(out.has_gyro_bias, method != Method::Ellipsoid);
        assert_eq!(out.converged, lib.converged);
    }
}

#[test]
fn estimator_handle_matches_library() {
    let (rust, c) = samples(22);
    let est = magcal_estimator_new(10, MAGCAL_AGGREGATOR_MEDIAN);
    assert!(!est.is_null());
    let mut out = MagcalCalibration::default();
    assert_eq!(unsafe { magcal_estimator_current(est, &mut out) }, MagcalStatus::InsufficientData);
    for s in &c[..1234] {
        assert_eq!(unsafe { magcal_estimator_push_sample(est, s) }, MagcalStatus::Ok);
    }
    assert_eq!(unsafe { magcal_estimator_window_count(est) }, 123);
    // timestamps must keep increasing across window boundaries
    assert_eq!(unsafe { magcal_estimator_push_sample(est, &c[1229]) }, MagcalStatus::InvalidArgument);

    let mut lib = IncrementalEstimator::new(SolverConfig::incremental()).unwrap();
    for w in build_windows(&rust[..1234], 10, Aggregator::Median).unwrap() {
        lib.add(w).unwrap();
    }
    assert_eq!(unsafe { magcal_estimator_current(est, &mut out) }, MagcalStatus::Ok);
    let cur = lib.current().unwrap();
    assert_eq!(out.pseudo_hard_iron, <[f64; 3]>::from(cur.pseudo_hard_iron));
    assert_eq!(unsafe { magcal_estimator_final(est, 0.2, &mut out) }, MagcalStatus::Ok);
    let fin = final_estimate(&lib, 0.2).unwrap();
    assert_eq!(out.gyro_bias, <[f64; 3]>::from(fin.gyro_bias.unwrap()));
    assert_eq!(unsafe { magcal_estimator_final(est, 0.0, &mut out) }, MagcalStatus::InvalidArgument);
    unsafe { magcal_estimator_free(est) };
}

#[test]
fn too_few_samples() {
    let (_, c) = samples(23);
    let mut out = MagcalCalibration::default();
    let status = unsafe { magcal_calibrate(c.as_ptr(), 25, MAGCAL_METHOD_BFG, 0, 0, &mut out) };
    assert_eq!(status, MagcalStatus::InsufficientData);
}
