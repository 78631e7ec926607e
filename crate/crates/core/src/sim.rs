//! Monte Carlo generator for sinusoidal-attitude calibration runs.
//!
//! Each Euler angle follows `A_i sin((ω_i / A_i) t + φ_i)` so that the peak
//! angle rate of axis `i` is `ω_i`. Attitude uses the ZYX (heading, pitch,
//! roll) convention with `R` mapping body to world; the true body-frame field
//! is `Rᵀ m0`.

use std::f64::consts::PI;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::model::SensorSample;

/// Pitch closer than this to ±90° is rejected.
pub const GIMBAL_LOCK_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// Roll, pitch, heading amplitudes in degrees.
    pub amplitude_deg: [f64; 3],
    /// Per-axis `[lo, hi]` range of the peak angle rate, rad/s.
    pub rate_range: [[f64; 2]; 3],
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        for (a, [lo, hi]) in self.amplitude_deg.iter().zip(self.rate_range) {
            if !(*a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidConfig(format!("amplitude {a} must be positive")));
            }
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidConfig(format!("rate range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }
}

/// Ground-truth distortion of a simulated sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthParams {
    /// Local field in the world frame, milligauss.
    pub m0: [f64; 3],
    /// Upper-triangular soft-iron entries `[a00, a01, a02, a11, a12, a22]`.
    pub soft_iron_upper: [f64; 6],
    /// Milligauss.
    pub pseudo_hard_iron: [f64; 3],
    /// rad/s.
    pub gyro_bias: [f64; 3],
}

impl TruthParams {
    /// The reference sensor used by every preset.
    pub fn reference() -> Self {
        TruthParams {
            m0: [227.0, 52.0, 412.0],
            soft_iron_upper: [1.10, 0.10, 0.04, 0.88, 0.02, 1.22],
            pseudo_hard_iron: [20.0, 120.0, 90.0],
            gyro_bias: [4e-3, -5e-3, 2e-3],
        }
    }

    /// No distortion, no biases.
    pub fn ideal() -> Self {
        TruthParams {
            soft_iron_upper: [1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
            pseudo_hard_iron: [0.0; 3],
            gyro_bias: [0.0; 3],
            ..Self::reference()
        }
    }

    pub fn soft_iron(&self) -> Mat3 {
        let [a, b, c, d, e, f] = self.soft_iron_upper;
        Mat3::new(a, b, c, b, d, e, c, e, f)
    }

    pub fn m0(&self) -> Vec3 {
        Vec3::from(self.m0)
    }

    pub fn pseudo_hard_iron(&self) -> Vec3 {
        Vec3::from(self.pseudo_hard_iron)
    }

    pub fn gyro_bias(&self) -> Vec3 {
        Vec3::from(self.gyro_bias)
    }

    /// Magnetic declination of `m0` in degrees (east positive).
    pub fn declination_deg(&self) -> f64 {
        self.m0[1].atan2(self.m0[0]).to_degrees()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub motion: MotionSpec,
    pub truth: TruthParams,
    /// Seconds.
    pub duration: f64,
    /// Hz.
    pub rate: f64,
    /// Milligauss.
    pub sigma_mag: f64,
    /// rad/s.
    pub sigma_gyro: f64,
    pub rng_seed: u64,
}

impl DatasetSpec {
    pub fn sample_count(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn noise_free(mut self) -> Self {
        self.sigma_mag = 0.0;
        self.sigma_gyro = 0.0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_truth(mut self, truth: TruthParams) -> Self {
        self.truth = truth;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Wam,
    Mam,
    Lam,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Wam, Preset::Mam, Preset::Lam];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Wam => "wam",
            Preset::Mam => "mam",
            Preset::Lam => "lam",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wam" => Ok(Preset::Wam),
            "mam" => Ok(Preset::Mam),
            "lam" => Ok(Preset::Lam),
            _ => Err(Error::UnknownPreset(s.to_string())),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Wide, mid and low angular-motion datasets: 600 s at 10 Hz with the
/// reference sensor distortion.
pub fn preset(which: Preset) -> DatasetSpec {
    let amplitude_deg = match which {
        Preset::Wam => [5.0, 45.0, 360.0],
        Preset::Mam => [5.0, 5.0, 360.0],
        Preset::Lam => [5.0, 45.0, 90.0],
    };
    DatasetSpec {
        name: which.name().to_string(),
        motion: MotionSpec {
            amplitude_deg,
            rate_range: [[0.05, 0.08], [0.1, 0.3], [0.2, 0.4]],
        },
        truth: TruthParams::reference(),
        duration: 600.0,
        rate: 10.0,
        sigma_mag: 10.0,
        sigma_gyro: 0.010,
        rng_seed: 0,
    }
}

pub fn preset_by_name(name: &str) -> Result<DatasetSpec> {
    Ok(preset(name.parse()?))
}

/// Roll, pitch and heading (radians) at time `t`.
pub fn euler_trajectory(spec: &MotionSpec, t: f64, phases: &[f64; 3], rates: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| {
        let amp = spec.amplitude_deg[i].to_radians();
        amp * ((rates[i] / amp) * t + phases[i]).sin()
    })
}

/// Time derivative of [`euler_trajectory`], rad/s.
pub fn euler_rates(spec: &MotionSpec, t: f64, phases: &[f64; 3], rates: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| {
        let amp = spec.amplitude_deg[i].to_radians();
        rates[i] * ((rates[i] / amp) * t + phases[i]).cos()
    })
}

/// Body-to-world rotation for ZYX Euler angles (radians).
pub fn attitude_matrix(roll: f64, pitch: f64, heading: f64) -> Mat3 {
    Rotation3::from_euler_angles(roll, pitch, heading).into_inner()
}

/// Body angular velocity from ZYX Euler angles and their rates (radians).
pub fn euler_rates_to_body(roll: f64, pitch: f64, _heading: f64, euler_rates: [f64; 3]) -> Result<Vec3> {
    if (pitch.abs() - PI / 2.0).abs() < GIMBAL_LOCK_MARGIN {
        return Err(Error::GimbalLock {
            pitch_deg: pitch.to_degrees(),
        });
    }
    let [dr, dp, dh] = euler_rates;
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    Ok(Vec3::new(dr - sp * dh, cr * dp + sr * cp * dh, -sr * dp + cr * cp * dh))
}

/// Attitude in degrees; the form stored with datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attitude {
    pub roll: f64,
    pub pitch: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub samples: Vec<SensorSample>,
    pub truth_attitude: Vec<Attitude>,
    pub truth_body_rates: Vec<Vec3>,
    pub spec: DatasetSpec,
    /// Per-axis peak angle rates drawn for this run, rad/s.
    pub rates: [f64; 3],
    /// Per-axis phases drawn for this run, radians.
    pub phases: [f64; 3],
}

/// Simulates a run. The random draws (rates, phases, then per-sample noise)
/// happen in a fixed order regardless of the noise levels, so a noise-free
/// spec follows the same trajectory as its noisy counterpart.
pub fn generate(spec: &DatasetSpec) -> Result<SimulatedDataset> {
    spec.motion.validate()?;
    if !(spec.rate > 0.0 && spec.duration > 0.0) {
        return Err(Error::InvalidConfig("duration and rate must be positive".into()));
    }
    if !(spec.sigma_mag >= 0.0 && spec.sigma_gyro >= 0.0) {
        return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let rates: [f64; 3] = std::array::from_fn(|i| {
        let [lo, hi] = spec.motion.rate_range[i];
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    });
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(-PI..PI));

    let soft_iron = spec.truth.soft_iron();
    let m0 = spec.truth.m0();
    let mb = spec.truth.pseudo_hard_iron();
    let wb = spec.truth.gyro_bias();

    let n = spec.sample_count();
    let mut samples = Vec::with_capacity(n);
    let mut truth_attitude = Vec::with_capacity(n);
    let mut truth_body_rates = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / spec.rate;
        let [roll, pitch, heading] = euler_trajectory(&spec.motion, t, &phases, &rates);
        let body_rate = euler_rates_to_body(
            roll,
            pitch,
            heading,
            euler_rates(&spec.motion, t, &phases, &rates),
        )?;
        let r = attitude_matrix(roll, pitch, heading);
        let field = r.transpose() * m0;

        let mag_noise = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let gyro_noise = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let mag = soft_iron * (field + mb) + mag_noise * spec.sigma_mag;
        let gyro = body_rate + wb + gyro_noise * spec.sigma_gyro;

        samples.push(SensorSample::new(t, mag, gyro));
        truth_attitude.push(Attitude {
            roll: roll.to_degrees(),
            pitch: pitch.to_degrees(),
            heading: heading.to_degrees(),
        });
        truth_body_rates.push(body_rate);
    }
    Ok(SimulatedDataset {
        samples,
        truth_attitude,
        truth_body_rates,
        spec: spec.clone(),
        rates,
        phases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::skew;

    #[test]
    fn trajectory_starts_level_with_zero_phase() {
        let spec = preset(Preset::Wam).motion;
        let a = euler_trajectory(&spec, 0.0, &[0.0; 3], &[0.06, 0.2, 0.3]);
        assert_eq!(a, [0.0; 3]);
    }

    #[test]
    fn trajectory_bounded_and_peak_rate_matches() {
        let spec = preset(Preset::Wam).motion;
        let rates = [0.07, 0.25, 0.33];
        let phases = [0.3, -1.2, 2.0];
        let dt = 1e-3;
        let mut peak = [0.0f64; 3];
        for k in 0..400_000 {
            let t = k as f64 * dt;
            let a = euler_trajectory(&spec, t, &phases, &rates);
            let b = euler_trajectory(&spec, t + dt, &phases, &rates);
            for i in 0..3 {
                assert!(a[i].abs() <= spec.amplitude_deg[i].to_radians() + 1e-15);
                peak[i] = peak[i].max(((b[i] - a[i]) / dt).abs());
            }
        }
        for i in 0..3 {
            assert!((peak[i] - rates[i]).abs() < 1e-3 * rates[i], "{i}: {} vs {}", peak[i], rates[i]);
        }
    }

    #[test]
    fn body_rates_simple_cases() {
        let w = euler_rates_to_body(0.0, 0.0, 0.0, [0.1, 0.2, 0.3]).unwrap();
        assert!((w - Vec3::new(0.1, 0.2, 0.3)).norm() < 1e-15);
        let w = euler_rates_to_body(0.0, 0.0, 1.0, [0.0, 0.0, 0.5]).unwrap();
        assert!((w - Vec3::new(0.0, 0.0, 0.5)).norm() < 1e-15);
        assert!(matches!(
            euler_rates_to_body(0.0, PI / 2.0, 0.0, [0.0; 3]),
            Err(Error::GimbalLock { .. })
        ));
    }

    #[test]
    fn body_rates_match_rotation_finite_differences() {
        // Rᵀ Ṙ = [w]× along a sampled trajectory
        let spec = preset(Preset::Wam).motion;
        let rates = [0.07, 0.25, 0.33];
        let phases = [0.3, -1.2, 2.0];
        let h = 1e-5;
        for k in 0..200 {
            let t = k as f64 * 1.7;
            let at = |t: f64| {
                let [r, p, y] = euler_trajectory(&spec, t, &phases, &rates);
                attitude_matrix(r, p, y)
            };
            let r_dot = (at(t + h) - at(t - h)) / (2.0 * h);
            let omega = at(t).transpose() * r_dot;
            let [r, p, y] = euler_trajectory(&spec, t, &phases, &rates);
            let w = euler_rates_to_body(r, p, y, euler_rates(&spec, t, &phases, &rates)).unwrap();
            assert!((omega - skew(&w)).norm() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn ideal_sensor_preserves_field_norm() {
        let spec = preset(Preset::Wam).with_truth(TruthParams::ideal()).noise_free();
        let ds = generate(&spec).unwrap();
        let norm = Vec3::new(227.0, 52.0, 412.0).norm();
        for s in &ds.samples {
            assert!((s.mag.norm() - norm).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_free_samples_satisfy_sensor_models() {
        let spec = preset(Preset::Wam).noise_free();
        let ds = generate(&spec).unwrap();
        let a = spec.truth.soft_iron();
        let c = a.try_inverse().unwrap();
        let m0 = spec.truth.m0();
        for ((s, att), w) in ds.samples.iter().zip(&ds.truth_attitude).zip(&ds.truth_body_rates) {
            // ellipsoid locus: |C m − m_b| = |m0|
            let recovered = c * s.mag - spec.truth.pseudo_hard_iron();
            assert!((recovered.norm() - m0.norm()).abs() < 1e-9);
            let r = attitude_matrix(att.roll.to_radians(), att.pitch.to_radians(), att.heading.to_radians());
            assert!((a * (r.transpose() * m0 + spec.truth.pseudo_hard_iron()) - s.mag).norm() < 1e-9);
            assert!((s.gyro - w - spec.truth.gyro_bias()).norm() < 1e-15);
        }
    }

    #[test]
    fn gyro_noise_mean_recovers_bias() {
        let spec = preset(Preset::Wam);
        let ds = generate(&spec).unwrap();
        let n = ds.samples.len() as f64;
        let mean: Vec3 = ds
            .samples
            .iter()
            .zip(&ds.truth_body_rates)
            .map(|(s, w)| s.gyro - w)
            .sum::<Vec3>()
            / n;
        let bound = 3.0 * spec.sigma_gyro / n.sqrt();
        for i in 0..3 {
            assert!((mean[i] - spec.truth.gyro_bias[i]).abs() < bound);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = preset(Preset::Mam).with_seed(99);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_ne!(
            generate(&spec).unwrap().samples,
            generate(&spec.clone().with_seed(100)).unwrap().samples
        );
    }

    #[test]
    fn presets_follow_the_amplitude_table() {
        assert_eq!(preset(Preset::Wam).motion.amplitude_deg, [5.0, 45.0, 360.0]);
        assert_eq!(preset(Preset::Mam).motion.amplitude_deg[1], 5.0);
        assert_eq!(preset(Preset::Lam).motion.amplitude_deg[2], 90.0);
        assert_eq!(preset(Preset::Wam).sample_count(), 6000);
        assert!(matches!(preset_by_name("xam"), Err(Error::UnknownPreset(_))));
        assert_eq!(preset_by_name("LAM").unwrap().name, "lam");
    }
}
