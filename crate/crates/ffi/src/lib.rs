//! C interface to the `magcal` calibration library.
//!
//! Every function returns a [`MagcalStatus`]. On failure a description is
//! available from [`magcal_last_error_message`] on the same thread.
//! Estimators are opaque handles created by [`magcal_estimator_new`] and
//! released with [`magcal_estimator_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use magcal::math::{geodesic_distance, Mat3, SpdMat3, Vec3};
use magcal::model::{aggregate_window, Aggregator, CalibrationResult, SensorSample};
use magcal::runner::{calibrate, Method, RunConfig};
use magcal::solver::{final_estimate, IncrementalEstimator, SolverConfig};
use magcal::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InsufficientData = 3,
    NotPositiveDefinite = 4,
    NumericalFailure = 5,
    Panic = 6,
}

pub const MAGCAL_METHOD_BFG: u32 = 0;
pub const MAGCAL_METHOD_IFG: u32 = 1;
pub const MAGCAL_METHOD_ELLIPSOID: u32 = 2;

pub const MAGCAL_AGGREGATOR_MEDIAN: u32 = 0;
pub const MAGCAL_AGGREGATOR_MEAN: u32 = 1;

/// One sensor sample: seconds, milligauss, rad/s.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MagcalSample {
    pub t: f64,
    pub mag: [f64; 3],
    pub gyro: [f64; 3],
}

/// A calibration. Corrected field is `inverse_soft_iron * m - pseudo_hard_iron`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MagcalCalibration {
    /// Row-major, unit determinant.
    pub soft_iron: [f64; 9],
    /// Row-major inverse of `soft_iron`.
    pub inverse_soft_iron: [f64; 9],
    pub hard_iron: [f64; 3],
    pub pseudo_hard_iron: [f64; 3],
    /// Zero when `has_gyro_bias` is false.
    pub gyro_bias: [f64; 3],
    pub has_gyro_bias: bool,
    pub converged: bool,
    pub iterations: u64,
    pub cost: f64,
}

/// Online calibration state.
pub struct MagcalEstimator {
    inner: IncrementalEstimator,
    theta: usize,
    aggregator: Aggregator,
    pending: Vec<SensorSample>,
    last_t: Option<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MagcalStatus {
    match e {
        Error::TooFewSamples { .. } | Error::InsufficientWindows { .. } | Error::InsufficientHistory { .. } => {
            MagcalStatus::InsufficientData
        }
        Error::NotPositiveDefinite { .. } | Error::NotSymmetric { .. } => MagcalStatus::NotPositiveDefinite,
        Error::NonFinite(_)
        | Error::ParameterOverflow { .. }
        | Error::DeterminantOutOfTolerance { .. }
        | Error::DegenerateFit
        | Error::GimbalLock { .. } => MagcalStatus::NumericalFailure,
        _ => MagcalStatus::InvalidArgument,
    }
}

struct Fail(MagcalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MagcalStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MagcalStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MagcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MagcalStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MagcalStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `n` reads.
unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

fn method_of(m: u32) -> Result<Method, Fail> {
    match m {
        MAGCAL_METHOD_BFG => Ok(Method::Bfg),
        MAGCAL_METHOD_IFG => Ok(Method::Ifg),
        MAGCAL_METHOD_ELLIPSOID => Ok(Method::Ellipsoid),
        _ => Err(invalid(format!("unknown method {m}"))),
    }
}

fn aggregator_of(a: u32) -> Result<Aggregator, Fail> {
    match a {
        MAGCAL_AGGREGATOR_MEDIAN => Ok(Aggregator::Median),
        MAGCAL_AGGREGATOR_MEAN => Ok(Aggregator::Mean),
        _ => Err(invalid(format!("unknown aggregator {a}"))),
    }
}

fn sample_of(s: &MagcalSample) -> SensorSample {
    SensorSample::new(s.t, Vec3::from(s.mag), Vec3::from(s.gyro))
}

fn row_major(m: &Mat3) -> [f64; 9] {
    std::array::from_fn(|k| m[(k / 3, k % 3)])
}

fn from_row_major(a: &[f64; 9]) -> Mat3 {
    Mat3::from_fn(|i, j| a[3 * i + j])
}

fn to_c(r: &CalibrationResult) -> MagcalCalibration {
    MagcalCalibration {
        soft_iron: row_major(r.soft_iron.matrix()),
        inverse_soft_iron: row_major(r.inverse_soft_iron.matrix()),
        hard_iron: r.hard_iron.into(),
        pseudo_hard_iron: r.pseudo_hard_iron.into(),
        gyro_bias: r.gyro_bias.unwrap_or_default().into(),
        has_gyro_bias: r.gyro_bias.is_some(),
        converged: r.converged,
        iterations: r.iterations as u64,
        cost: r.final_cost,
    }
}

fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: checked non-null; the caller guarantees it is writable.
    unsafe { out.write(value) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn magcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn magcal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Calibrates `n` time-ordered samples. `theta` is the window length in
/// samples, or 0 to use one second of data.
///
/// # Safety
/// `samples` must be valid for `n` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn magcal_calibrate(
    samples: *const MagcalSample,
    n: usize,
    method: u32,
    theta: usize,
    aggregator: u32,
    out: *mut MagcalCalibration,
) -> MagcalStatus {
    guard(|| {
        let input: Vec<SensorSample> = slice_in(samples, n, "samples")?.iter().map(sample_of).collect();
        let cfg = RunConfig {
            method: method_of(method)?,
            theta: (theta != 0).then_some(theta),
            aggregator: aggregator_of(aggregator)?,
            ..RunConfig::default()
        };
        let cal = calibrate(&input, &cfg)?;
        write_out(out, to_c(&cal.result))
    })
}

/// Corrects `n` field vectors (`3n` doubles) from `mag_in` into `mag_out`.
/// The two buffers may be the same.
///
/// # Safety
/// `cal` must be valid; `mag_in` and `mag_out` must be valid for `3n` doubles.
#[no_mangle]
pub unsafe extern "C" fn magcal_apply(
    cal: *const MagcalCalibration,
    mag_in: *const f64,
    n: usize,
    mag_out: *mut f64,
) -> MagcalStatus {
    guard(|| {
        let cal = cal.as_ref().ok_or_else(|| null("calibration"))?;
        if n > 0 && (mag_in.is_null() || mag_out.is_null()) {
            return Err(null("field buffer"));
        }
        let c = from_row_major(&cal.inverse_soft_iron);
        let mb = Vec3::from(cal.pseudo_hard_iron);
        for k in 0..n {
            // read before write so in-place correction works
            let m = Vec3::new(*mag_in.add(3 * k), *mag_in.add(3 * k + 1), *mag_in.add(3 * k + 2));
            let v = c * m - mb;
            for i in 0..3 {
                *mag_out.add(3 * k + i) = v[i];
            }
        }
        Ok(())
    })
}

/// Affine-invariant distance between two row-major SPD matrices.
///
/// # Safety
/// `a` and `b` must be valid for 9 reads, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn magcal_geodesic_distance(a: *const f64, b: *const f64, out: *mut f64) -> MagcalStatus {
    guard(|| {
        let a: &[f64; 9] = slice_in(a, 9, "a")?.try_into().map_err(|_| null("a"))?;
        let b: &[f64; 9] = slice_in(b, 9, "b")?.try_into().map_err(|_| null("b"))?;
        let d = geodesic_distance(&SpdMat3::new(from_row_major(a))?, &SpdMat3::new(from_row_major(b))?);
        write_out(out, d)
    })
}

/// Creates an online estimator that forms one window per `theta` pushed
/// samples. Returns null on invalid arguments.
#[no_mangle]
pub extern "C" fn magcal_estimator_new(theta: usize, aggregator: u32) -> *mut MagcalEstimator {
    let mut handle = ptr::null_mut();
    guard(|| {
        if theta < 2 {
            return Err(Error::InvalidWindow(theta).into());
        }
        let est = MagcalEstimator {
            inner: IncrementalEstimator::new(SolverConfig::incremental())?,
            theta,
            aggregator: aggregator_of(aggregator)?,
            pending: Vec::with_capacity(theta),
            last_t: None,
        };
        handle = Box::into_raw(Box::new(est));
        Ok(())
    });
    handle
}

/// Adds one sample; every `theta`-th sample triggers an estimator update.
///
/// # Safety
/// `est` must come from [`magcal_estimator_new`]; `sample` must be valid.
#[no_mangle]
pub unsafe extern "C" fn magcal_estimator_push_sample(
    est: *mut MagcalEstimator,
    sample: *const MagcalSample,
) -> MagcalStatus {
    guard(|| {
        let est = est.as_mut().ok_or_else(|| null("estimator"))?;
        let s = sample_of(sample.as_ref().ok_or_else(|| null("sample"))?);
        if !s.t.is_finite() || est.last_t.is_some_and(|prev| s.t <= prev) {
            return Err(invalid(format!("timestamp {} does not increase", s.t)));
        }
        est.last_t = Some(s.t);
        est.pending.push(s);
        if est.pending.len() == est.theta {
            let win = aggregate_window(&est.pending, est.aggregator);
            est.pending.clear();
            est.inner.add(win?)?;
        }
        Ok(())
    })
}

/// Number of windows consumed so far.
///
/// # Safety
/// `est` must be null or come from [`magcal_estimator_new`].
#[no_mangle]
pub unsafe extern "C" fn magcal_estimator_window_count(est: *const MagcalEstimator) -> usize {
    est.as_ref().map_or(0, |e| e.inner.windows().len())
}

/// Latest estimate. Fails with `InsufficientData` before the first window.
///
/// # Safety
/// `est` must come from [`magcal_estimator_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn magcal_estimator_current(
    est: *const MagcalEstimator,
    out: *mut MagcalCalibration,
) -> MagcalStatus {
    guard(|| {
        let est = est.as_ref().ok_or_else(|| null("estimator"))?;
        if est.inner.windows().is_empty() {
            return Err(Error::InsufficientWindows { needed: 1, got: 0 }.into());
        }
        write_out(out, to_c(&est.inner.current()?))
    })
}

/// Mean of the last `tail_fraction` of the per-update estimates.
///
/// # Safety
/// `est` must come from [`magcal_estimator_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn magcal_estimator_final(
    est: *const MagcalEstimator,
    tail_fraction: f64,
    out: *mut MagcalCalibration,
) -> MagcalStatus {
    guard(|| {
        let est = est.as_ref().ok_or_else(|| null("estimator"))?;
        if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
            return Err(invalid(format!("tail fraction {tail_fraction} is outside (0, 1]")));
        }
        write_out(out, to_c(&final_estimate(&est.inner, tail_fraction)?))
    })
}

/// Releases an estimator. Null is ignored.
///
/// # Safety
/// `est` must be null or come from [`magcal_estimator_new`] and not have
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn magcal_estimator_free(est: *mut MagcalEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}
