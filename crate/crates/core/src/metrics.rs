//! Ellipsoid-fit baseline and the evaluation metrics: parameter errors,
//! corrected-field magnitude spread and heading RMSE.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{geodesic_distance, normalize_det, Mat3, SpdMat3, Vec3};
use crate::model::CalibrationResult;
use crate::sim::{Attitude, TruthParams, GIMBAL_LOCK_MARGIN};

/// Algebraic quadric fit of magnetometer data.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidFit {
    /// Mapping from the unit sphere onto the data ellipsoid, scaled to unit
    /// determinant. Identity when the fit is not an ellipsoid.
    pub soft_iron: Mat3,
    /// Ellipsoid center (hard-iron), milligauss.
    pub center: Vec3,
    /// Field magnitude implied by the fitted volume, milligauss.
    pub radius: f64,
    /// False when the fitted quadric is not an ellipsoid.
    pub converged: bool,
}

impl EllipsoidFit {
    /// The fit as a calibration; `None` when it did not converge.
    pub fn calibration(&self) -> Option<CalibrationResult> {
        if !self.converged {
            return None;
        }
        let mut r = CalibrationResult::from_soft_hard(&self.soft_iron, &self.center, None).ok()?;
        r.converged = true;
        Some(r)
    }
}

pub const MIN_ELLIPSOID_POINTS: usize = 9;

/// Least-squares fit of `xᵀMx + 2gᵀx = 1` to the centered, scaled points,
/// accepted only when `M` (after moving to the center) is positive definite.
pub fn ellipsoid_fit(mags: &[Vec3]) -> Result<EllipsoidFit> {
    if mags.len() < MIN_ELLIPSOID_POINTS {
        return Err(Error::TooFewSamples {
            needed: MIN_ELLIPSOID_POINTS,
            got: mags.len(),
        });
    }
    if mags.iter().any(|m| !m.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("magnetometer samples"));
    }
    let centroid = mags.iter().sum::<Vec3>() / mags.len() as f64;
    let scale = (mags.iter().map(|m| (m - centroid).norm_squared()).sum::<f64>() / mags.len() as f64).sqrt();
    if scale == 0.0 {
        return Err(Error::DegenerateFit);
    }

    let design = DMatrix::from_fn(mags.len(), 9, |row, col| {
        let p = (mags[row] - centroid) / scale;
        match col {
            0 => p.x * p.x,
            1 => p.y * p.y,
            2 => p.z * p.z,
            3 => 2.0 * p.x * p.y,
            4 => 2.0 * p.x * p.z,
            5 => 2.0 * p.y * p.z,
            6 => 2.0 * p.x,
            7 => 2.0 * p.y,
            _ => 2.0 * p.z,
        }
    });
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0 && smin > 1e-12 * smax) {
        return Err(Error::DegenerateFit);
    }
    let v = svd
        .solve(&DVector::from_element(mags.len(), 1.0), 0.0)
        .map_err(|_| Error::DegenerateFit)?;

    let quad = Mat3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2]);
    let lin = Vec3::new(v[6], v[7], v[8]);
    let failed = |center: Vec3| EllipsoidFit {
        soft_iron: Mat3::identity(),
        center,
        radius: f64::NAN,
        converged: false,
    };
    let Some(quad_inv) = quad.try_inverse() else {
        return Ok(failed(centroid));
    };
    let center_n = -(quad_inv * lin);
    let center = center_n * scale + centroid;
    let k = 1.0 + center_n.dot(&(quad * center_n));
    if !(k > 0.0 && center.iter().all(|x| x.is_finite())) {
        return Ok(failed(if center.iter().all(|x| x.is_finite()) { center } else { centroid }));
    }
    let Ok(shape) = SpdMat3::new(quad / k) else {
        return Ok(failed(center));
    };
    let mapping = shape.inv_sqrt().into_inner();
    let (soft_iron, det_scale) = normalize_det(&mapping)?;
    Ok(EllipsoidFit {
        soft_iron,
        center,
        radius: det_scale * scale,
        converged: true,
    })
}

/// `C m − m_b` for every sample: the field in sensor axes, up to the
/// unit-determinant scale.
pub fn apply_calibration(result: &CalibrationResult, mags: &[Vec3]) -> Vec<Vec3> {
    let c = result.inverse_soft_iron.matrix();
    mags.iter().map(|m| c * m - result.pseudo_hard_iron).collect()
}

/// Sample standard deviation of the vector norms.
pub fn field_magnitude_std(fields: &[Vec3]) -> Result<f64> {
    if fields.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: fields.len(),
        });
    }
    let norms: Vec<f64> = fields.iter().map(|f| f.norm()).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let var = norms.iter().map(|n| (n - mean).powi(2)).sum::<f64>() / (norms.len() - 1) as f64;
    Ok(var.sqrt())
}

/// Maps an angle in degrees into `(−180, 180]`.
pub fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Magnetic heading (degrees, clockwise from magnetic north, in
/// `(−180, 180]`) of a body-frame field leveled with known roll and pitch.
pub fn tilt_compensated_heading(mag: &Vec3, roll_deg: f64, pitch_deg: f64) -> Result<f64> {
    let (roll, pitch) = (roll_deg.to_radians(), pitch_deg.to_radians());
    if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < GIMBAL_LOCK_MARGIN {
        return Err(Error::GimbalLock { pitch_deg });
    }
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    // Ry(pitch) Rx(roll) m
    let north = cp * mag.x + sp * sr * mag.y + sp * cr * mag.z;
    let east = cr * mag.y - sr * mag.z;
    Ok(wrap_deg((-east).atan2(north).to_degrees()))
}

/// RMSE of the wrapped differences, degrees.
pub fn heading_rmse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: estimates.len(),
            right: truth.len(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let sum: f64 = estimates.iter().zip(truth).map(|(e, t)| wrap_deg(e - t).powi(2)).sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterErrors {
    /// Geodesic distance between unit-determinant soft-irons.
    pub soft_iron: f64,
    /// Milligauss, between unit-determinant pseudo-hard-irons.
    pub hard_iron: f64,
    /// rad/s; absent when the method has no gyro bias.
    pub gyro_bias: Option<f64>,
}

/// Errors of an estimate against known truth, both brought onto the
/// `det(A) = 1` slice first.
pub fn parameter_errors(result: &CalibrationResult, truth: &TruthParams) -> Result<ParameterErrors> {
    let (truth_a, truth_scale) = normalize_det(&truth.soft_iron())?;
    let truth_mb = truth.pseudo_hard_iron() * truth_scale;
    let (est_a, est_scale) = normalize_det(result.soft_iron.matrix())?;
    let est_mb = result.pseudo_hard_iron * est_scale;
    Ok(ParameterErrors {
        soft_iron: geodesic_distance(&SpdMat3::new(truth_a)?, &SpdMat3::new(est_a)?),
        hard_iron: (est_mb - truth_mb).norm(),
        gyro_bias: result.gyro_bias.map(|wb| (wb - truth.gyro_bias()).norm()),
    })
}

/// How estimated magnetic headings are compared with true headings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadingReference {
    /// Magnetic heading compared directly with true heading (declination
    /// left in the error).
    #[default]
    Magnetic,
    /// Declination of the known local field added before comparison.
    Geographic,
}

impl std::str::FromStr for HeadingReference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "magnetic" => Ok(HeadingReference::Magnetic),
            "geographic" | "true" => Ok(HeadingReference::Geographic),
            other => Err(Error::InvalidConfig(format!("unknown heading reference `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method_name: String,
    pub dataset_name: String,
    pub converged: bool,
    /// Absent without truth parameters.
    pub soft_iron_geodesic_error: Option<f64>,
    /// Milligauss; absent without truth parameters.
    pub hard_iron_error: Option<f64>,
    /// rad/s; absent without truth or for magnetometer-only methods.
    pub gyro_bias_error: Option<f64>,
    /// Degrees; absent without attitude truth.
    pub heading_rmse: Option<f64>,
    /// Milligauss.
    pub field_magnitude_std: f64,
}

/// Inputs against which a calibration is scored.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationData<'a> {
    pub dataset_name: &'a str,
    pub mags: &'a [Vec3],
    pub attitude: Option<&'a [Attitude]>,
    pub truth: Option<&'a TruthParams>,
    pub heading_reference: HeadingReference,
}

pub fn headings(fields: &[Vec3], attitude: &[Attitude], offset_deg: f64) -> Result<Vec<f64>> {
    if fields.len() != attitude.len() {
        return Err(Error::LengthMismatch {
            left: fields.len(),
            right: attitude.len(),
        });
    }
    fields
        .iter()
        .zip(attitude)
        .map(|(f, a)| Ok(wrap_deg(tilt_compensated_heading(f, a.roll, a.pitch)? + offset_deg)))
        .collect()
}

/// Scores `result` on `data`.
pub fn evaluate(method_name: &str, result: &CalibrationResult, data: &EvaluationData) -> Result<EvaluationReport> {
    let corrected = apply_calibration(result, data.mags);
    let field_magnitude_std = field_magnitude_std(&corrected)?;
    let heading_rmse = match data.attitude {
        Some(att) => {
            let offset = match (data.heading_reference, data.truth) {
                (HeadingReference::Geographic, Some(t)) => t.declination_deg(),
                _ => 0.0,
            };
            let est = headings(&corrected, att, offset)?;
            let truth: Vec<f64> = att.iter().map(|a| a.heading).collect();
            Some(heading_rmse(&est, &truth)?)
        }
        None => None,
    };
    let errors = data.truth.map(|t| parameter_errors(result, t)).transpose()?;
    Ok(EvaluationReport {
        method_name: method_name.to_string(),
        dataset_name: data.dataset_name.to_string(),
        converged: result.converged,
        soft_iron_geodesic_error: errors.map(|e| e.soft_iron),
        hard_iron_error: errors.map(|e| e.hard_iron),
        gyro_bias_error: errors.and_then(|e| e.gyro_bias),
        heading_rmse,
        field_magnitude_std,
    })
}
