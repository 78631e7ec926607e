//! Measurement model: state parametrization, the attitude-free residual, its
//! analytic Jacobian and the windowing that turns raw samples into factors.
//!
//! Magnetometer: `m_m = A (m_t + m_b)`, gyroscope: `w_m = w_t + w_b`. With
//! `C = A⁻¹ = L Lᵀ` the field constancy in the world frame gives, per factor,
//!
//! ```text
//! r = [w − w_b]× (C m − m_b) + C ṁ
//! ```
//!
//! `L` has an exponential diagonal whose last entry is fixed by `det(C) = 1`,
//! so every state maps to a unit-determinant SPD soft-iron.

use nalgebra::{Cholesky, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{kron_row3, skew, vec3x3, Mat3, SpdMat3, Vec3};

/// Bound on `|l0|` and `|l2|`; beyond it the optimizer has diverged.
pub const DEFAULT_OVERFLOW_BOUND: f64 = 30.0;

pub const STATE_DIM: usize = 11;
pub type StateVector = SVector<f64, STATE_DIM>;
pub type Jacobian = SMatrix<f64, 3, STATE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSample {
    /// Seconds.
    pub t: f64,
    /// Milligauss.
    pub mag: Vec3,
    /// rad/s.
    pub gyro: Vec3,
}

impl SensorSample {
    pub fn new(t: f64, mag: Vec3, gyro: Vec3) -> Self {
        SensorSample { t, mag, gyro }
    }
}

/// The 11 unknowns: Cholesky parameters of `C`, pseudo-hard-iron, gyro bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationState {
    pub l: SVector<f64, 5>,
    pub pseudo_hard_iron: Vec3,
    pub gyro_bias: Vec3,
}

impl Default for CalibrationState {
    fn default() -> Self {
        Self::identity()
    }
}

impl CalibrationState {
    /// Uncalibrated sensors: `C = I`, zero biases.
    pub fn identity() -> Self {
        CalibrationState {
            l: SVector::zeros(),
            pseudo_hard_iron: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<5>(0).copy_from(&self.l);
        v.fixed_rows_mut::<3>(5).copy_from(&self.pseudo_hard_iron);
        v.fixed_rows_mut::<3>(8).copy_from(&self.gyro_bias);
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        CalibrationState {
            l: v.fixed_rows::<5>(0).into_owned(),
            pseudo_hard_iron: v.fixed_rows::<3>(5).into_owned(),
            gyro_bias: v.fixed_rows::<3>(8).into_owned(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// State equivalent to a (not necessarily unit-determinant) soft-iron
    /// `A` and pseudo-hard-iron `m_b`, rescaled onto the `det(A) = 1` slice.
    pub fn from_physical(soft_iron: &Mat3, pseudo_hard_iron: &Vec3, gyro_bias: &Vec3) -> Result<Self> {
        let (a_unit, scale) = crate::math::normalize_det(soft_iron)?;
        let c = SpdMat3::new(a_unit)?.inverse();
        Ok(CalibrationState {
            l: contract_cholesky(&c)?,
            pseudo_hard_iron: pseudo_hard_iron * scale,
            gyro_bias: *gyro_bias,
        })
    }
}

/// Lower-triangular factor `L` for the Cholesky parameters `l`.
pub fn cholesky_factor(l: &SVector<f64, 5>, bound: f64) -> Result<Mat3> {
    if let Some(i) = l.iter().position(|x| !x.is_finite()) {
        return Err(Error::ParameterOverflow {
            index: i,
            value: l[i],
            bound,
        });
    }
    for index in [0, 2] {
        if l[index].abs() > bound {
            return Err(Error::ParameterOverflow {
                index,
                value: l[index],
                bound,
            });
        }
    }
    let d0 = l[0].exp();
    let d1 = l[2].exp();
    Ok(Mat3::new(
        d0,
        0.0,
        0.0,
        l[1],
        d1,
        0.0,
        l[3],
        l[4],
        1.0 / (d0 * d1),
    ))
}

/// `(L, C = L Lᵀ)` for the Cholesky parameters; `det(C) = 1` by construction.
pub fn expand_cholesky(l: &SVector<f64, 5>) -> Result<(Mat3, SpdMat3)> {
    let lower = cholesky_factor(l, DEFAULT_OVERFLOW_BOUND)?;
    let c = SpdMat3::new(lower * lower.transpose())?;
    Ok((lower, c))
}

/// Inverse of [`expand_cholesky`] for a unit-determinant SPD matrix.
pub fn contract_cholesky(c: &SpdMat3) -> Result<SVector<f64, 5>> {
    let det = c.det();
    if (det - 1.0).abs() > 1e-6 {
        return Err(Error::DeterminantOutOfTolerance {
            det,
            tolerance: 1e-6,
        });
    }
    let chol = Cholesky::new(*c.matrix()).ok_or(Error::NotPositiveDefinite {
        eigenvalues: {
            let e = c.eigenvalues();
            [e[0], e[1], e[2]]
        },
    })?;
    let lower = chol.l();
    Ok(SVector::<f64, 5>::new(
        lower[(0, 0)].ln(),
        lower[(1, 0)],
        lower[(1, 1)].ln(),
        lower[(2, 0)],
        lower[(2, 1)],
    ))
}

/// `∂vec(C)/∂l` (9×5, column-stacked `vec`).
pub fn dvec_c_dl(lower: &Mat3) -> SMatrix<f64, 9, 5> {
    let l22 = lower[(2, 2)];
    let mut out = SMatrix::<f64, 9, 5>::zeros();
    for k in 0..5 {
        let mut dl = Mat3::zeros();
        match k {
            0 => {
                dl[(0, 0)] = lower[(0, 0)];
                dl[(2, 2)] = -l22;
            }
            1 => dl[(1, 0)] = 1.0,
            2 => {
                dl[(1, 1)] = lower[(1, 1)];
                dl[(2, 2)] = -l22;
            }
            3 => dl[(2, 0)] = 1.0,
            _ => dl[(2, 1)] = 1.0,
        }
        let dc = dl * lower.transpose() + lower * dl.transpose();
        out.set_column(k, &vec3x3(&dc));
    }
    out
}

/// One unary factor: window-aggregated field, field rate and angular rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorWindow {
    /// Milligauss.
    pub m: Vec3,
    /// Milligauss per second.
    pub m_dot: Vec3,
    /// rad/s.
    pub w: Vec3,
    pub t_mid: f64,
    pub count: usize,
}

fn residual_with(c: &Mat3, x: &CalibrationState, win: &FactorWindow) -> Vec3 {
    (win.w - x.gyro_bias).cross(&(c * win.m - x.pseudo_hard_iron)) + c * win.m_dot
}

/// `[w − w_b]× (C m − m_b) + C ṁ`, in milligauss per second.
pub fn residual(x: &CalibrationState, win: &FactorWindow) -> Result<Vec3> {
    let lower = cholesky_factor(&x.l, DEFAULT_OVERFLOW_BOUND)?;
    Ok(residual_with(&(lower * lower.transpose()), x, win))
}

/// Residual and Jacobian for a state whose `L` factor is already expanded.
pub(crate) fn linearize(
    lower: &Mat3,
    dc_dl: &SMatrix<f64, 9, 5>,
    x: &CalibrationState,
    win: &FactorWindow,
) -> (Vec3, Jacobian) {
    let c = lower * lower.transpose();
    let u = win.w - x.gyro_bias;
    let field = c * win.m - x.pseudo_hard_iron;
    let r = u.cross(&field) + c * win.m_dot;

    let mut jac = Jacobian::zeros();
    let dr_dvec_c = kron_row3(&win.m, &skew(&u)) + kron_row3(&win.m_dot, &Mat3::identity());
    jac.fixed_view_mut::<3, 5>(0, 0).copy_from(&(dr_dvec_c * dc_dl));
    jac.fixed_view_mut::<3, 3>(0, 5).copy_from(&skew(&(x.gyro_bias - win.w)));
    jac.fixed_view_mut::<3, 3>(0, 8).copy_from(&skew(&field));
    (r, jac)
}

/// Jacobian of [`residual`] with columns `[∂/∂l | ∂/∂m_b | ∂/∂w_b]`.
pub fn residual_jacobian(x: &CalibrationState, win: &FactorWindow) -> Result<Jacobian> {
    let lower = cholesky_factor(&x.l, DEFAULT_OVERFLOW_BOUND)?;
    Ok(linearize(&lower, &dvec_c_dl(&lower), x, win).1)
}

/// How raw samples inside a window are collapsed into one factor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Median,
    Mean,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "median" => Ok(Aggregator::Median),
            "mean" => Ok(Aggregator::Mean),
            other => Err(Error::InvalidConfig(format!("unknown aggregator `{other}`"))),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(vectors: &[Vec3], how: Aggregator) -> Vec3 {
    match how {
        Aggregator::Mean => vectors.iter().sum::<Vec3>() / vectors.len() as f64,
        Aggregator::Median => {
            let mut buf = vec![0.0; vectors.len()];
            Vec3::from_fn(|axis, _| {
                for (b, v) in buf.iter_mut().zip(vectors) {
                    *b = v[axis];
                }
                median(&mut buf)
            })
        }
    }
}

/// Per-sample field derivative inside one window: central differences in
/// the interior, one-sided at the edges, using the actual sample spacing.
fn window_derivatives(chunk: &[SensorSample]) -> Vec<Vec3> {
    let n = chunk.len();
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            (chunk[b].mag - chunk[a].mag) / (chunk[b].t - chunk[a].t)
        })
        .collect()
}

/// Builds one factor from a chunk of at least two samples.
pub fn aggregate_window(chunk: &[SensorSample], aggregator: Aggregator) -> Result<FactorWindow> {
    if chunk.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: chunk.len(),
        });
    }
    let mags: Vec<Vec3> = chunk.iter().map(|s| s.mag).collect();
    let gyros: Vec<Vec3> = chunk.iter().map(|s| s.gyro).collect();
    let rates = window_derivatives(chunk);
    Ok(FactorWindow {
        m: aggregate(&mags, aggregator),
        m_dot: aggregate(&rates, aggregator),
        w: aggregate(&gyros, aggregator),
        t_mid: 0.5 * (chunk[0].t + chunk[chunk.len() - 1].t),
        count: chunk.len(),
    })
}

/// Splits a time-ordered stream into `floor(len / theta)` factors; a trailing
/// partial window is dropped.
pub fn build_windows(
    stream: &[SensorSample],
    theta: usize,
    aggregator: Aggregator,
) -> Result<Vec<FactorWindow>> {
    if theta < 2 {
        return Err(Error::InvalidWindow(theta));
    }
    if stream.len() < theta {
        return Err(Error::TooFewSamples {
            needed: theta,
            got: stream.len(),
        });
    }
    stream
        .chunks_exact(theta)
        .map(|chunk| aggregate_window(chunk, aggregator))
        .collect()
}

/// Diagnostic raised when the normal equations cannot pin down every
/// parameter, typically because the angular motion was too small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationWarning {
    /// Condition number of the scaled normal-equations matrix.
    pub condition_number: f64,
    /// Unit-norm weakest direction in (scaled) parameter space.
    pub null_direction: Vec<f64>,
    /// Parameters dominating the weakest direction.
    pub unobservable: Vec<String>,
}

pub const PARAMETER_NAMES: [&str; STATE_DIM] = [
    "l0", "l1", "l2", "l3", "l4", "mb_x", "mb_y", "mb_z", "wb_x", "wb_y", "wb_z",
];

/// Expanded solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Soft-iron `A` (unit determinant).
    pub soft_iron: SpdMat3,
    /// `C = A⁻¹`.
    pub inverse_soft_iron: SpdMat3,
    /// `A m_b`, milligauss.
    pub hard_iron: Vec3,
    /// `m_b`, milligauss.
    pub pseudo_hard_iron: Vec3,
    /// rad/s; absent for magnetometer-only methods.
    pub gyro_bias: Option<Vec3>,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub excitation: Option<ExcitationWarning>,
}

impl CalibrationResult {
    pub fn from_state(x: &CalibrationState, final_cost: f64, iterations: usize, converged: bool) -> Result<Self> {
        let (_, c) = expand_cholesky(&x.l)?;
        let a = c.inverse();
        Ok(CalibrationResult {
            soft_iron: a,
            inverse_soft_iron: c,
            hard_iron: a.matrix() * x.pseudo_hard_iron,
            pseudo_hard_iron: x.pseudo_hard_iron,
            gyro_bias: Some(x.gyro_bias),
            final_cost,
            iterations,
            converged,
            excitation: None,
        })
    }

    /// No correction at all.
    pub fn identity() -> Self {
        CalibrationResult {
            soft_iron: SpdMat3::identity(),
            inverse_soft_iron: SpdMat3::identity(),
            hard_iron: Vec3::zeros(),
            pseudo_hard_iron: Vec3::zeros(),
            gyro_bias: None,
            final_cost: 0.0,
            iterations: 0,
            converged: true,
            excitation: None,
        }
    }

    /// Rebuild from a soft-iron `A` (any positive determinant) and the
    /// hard-iron offset `A m_b`; the result is rescaled to `det(A) = 1`.
    pub fn from_soft_hard(soft_iron: &Mat3, hard_iron: &Vec3, gyro_bias: Option<Vec3>) -> Result<Self> {
        let (a_unit, _) = crate::math::normalize_det(soft_iron)?;
        let a = SpdMat3::new(a_unit)?;
        let c = a.inverse();
        Ok(CalibrationResult {
            soft_iron: a,
            inverse_soft_iron: c,
            hard_iron: *hard_iron,
            pseudo_hard_iron: c.matrix() * hard_iron,
            gyro_bias,
            final_cost: 0.0,
            iterations: 0,
            converged: true,
            excitation: None,
        })
    }
}
