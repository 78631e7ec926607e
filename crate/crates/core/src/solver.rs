//! Batch and incremental estimation over the single-node factor model.
//!
//! All factors are unary and attach to the same 11-parameter state, so the
//! normal equations are a dense 11×11 system. The batch solver runs
//! Levenberg–Marquardt to convergence; the incremental estimator appends
//! one factor at a time and takes a bounded number of damped Gauss–Newton
//! steps warm-started from the previous estimate.

use nalgebra::{Cholesky, SMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::math::{vec3x3, Mat3, SpdMat3};
use crate::model::{
    cholesky_factor, dvec_c_dl, linearize, CalibrationResult, CalibrationState, ExcitationWarning,
    FactorWindow, StateVector, DEFAULT_OVERFLOW_BOUND, PARAMETER_NAMES, STATE_DIM,
};

type Hessian = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Scaled normal-equation condition number above which the problem is
/// reported as insufficiently excited.
pub const RANK_DEFICIENCY_CONDITION: f64 = 1e12;

/// Fewest factors for which the batch problem can be determined (3 rows each).
pub const MIN_BATCH_WINDOWS: usize = 4;

const MAX_DAMPING: f64 = 1e32;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Residual noise covariance, (mG/s)².
    pub noise_covariance: Mat3,
    /// Stop when the relative decrease of an accepted step falls below this.
    pub rel_tol: f64,
    /// Stop when the max-norm of the gradient falls below this.
    pub abs_tol: f64,
    pub max_iterations: usize,
    pub damping_init: f64,
    pub damping_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::batch()
    }
}

impl SolverConfig {
    pub fn batch() -> Self {
        SolverConfig {
            noise_covariance: Mat3::identity() * 1e-6,
            rel_tol: 1e-7,
            abs_tol: 1e-7,
            max_iterations: 100,
            damping_init: 1e-4,
            damping_scale: 10.0,
        }
    }

    pub fn incremental() -> Self {
        SolverConfig {
            max_iterations: 10,
            ..Self::batch()
        }
    }

    /// Validates the configuration and returns the information matrix `Σ⁻¹`.
    pub fn information(&self) -> Result<Mat3> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::InvalidConfig("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if !(self.damping_init > 0.0 && self.damping_scale > 1.0) {
            return Err(Error::InvalidConfig(
                "damping_init must be positive and damping_scale greater than 1".into(),
            ));
        }
        Ok(SpdMat3::new(self.noise_covariance)?.inverse().into_inner())
    }
}

fn cost_only(x: &CalibrationState, windows: &[FactorWindow], info: &Mat3) -> Result<f64> {
    let lower = cholesky_factor(&x.l, DEFAULT_OVERFLOW_BOUND)?;
    let c = lower * lower.transpose();
    Ok(windows
        .iter()
        .map(|win| {
            let r = (win.w - x.gyro_bias).cross(&(c * win.m - x.pseudo_hard_iron)) + c * win.m_dot;
            r.dot(&(info * r))
        })
        .sum())
}

/// Sum over factors of the squared Mahalanobis norm of the residual.
pub fn objective(x: &CalibrationState, windows: &[FactorWindow], cfg: &SolverConfig) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InsufficientWindows { needed: 1, got: 0 });
    }
    cost_only(x, windows, &cfg.information()?)
}

struct Linearization {
    cost: f64,
    hessian: Hessian,
    gradient: StateVector,
}

fn linearize_all(x: &CalibrationState, windows: &[FactorWindow], info: &Mat3) -> Result<Linearization> {
    let lower = cholesky_factor(&x.l, DEFAULT_OVERFLOW_BOUND)?;
    let dc = dvec_c_dl(&lower);
    let mut cost = 0.0;
    let mut hessian = Hessian::zeros();
    let mut gradient = StateVector::zeros();
    for win in windows {
        let (r, j) = linearize(&lower, &dc, x, win);
        let wr = info * r;
        let wj = info * j;
        cost += r.dot(&wr);
        hessian += j.transpose() * wj;
        gradient += j.transpose() * wr;
    }
    Ok(Linearization {
        cost,
        hessian,
        gradient,
    })
}

/// Excitation check on the Jacobi-scaled normal equations.
pub fn excitation_diagnostic(hessian: &Hessian) -> Option<ExcitationWarning> {
    let diag = hessian.diagonal();
    let scale = diag.map(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let scaled = Hessian::from_fn(|i, j| hessian[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(scaled);
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let lmax = eig.eigenvalues.max();
    let condition_number = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if condition_number <= RANK_DEFICIENCY_CONDITION {
        return None;
    }
    let dir = eig.eigenvectors.column(imin);
    let peak = dir.amax();
    let unobservable = dir
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() >= 0.5 * peak)
        .map(|(i, _)| PARAMETER_NAMES[i].to_string())
        .collect();
    Some(ExcitationWarning {
        condition_number,
        null_direction: dir.iter().copied().collect(),
        unobservable,
    })
}

/// Outcome of one damped least-squares run.
#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub state: CalibrationState,
    pub cost: f64,
    /// Linear solves performed, accepted or not.
    pub iterations: usize,
    pub converged: bool,
    /// Cost after the start and after every accepted step.
    pub accepted_costs: Vec<f64>,
    pub excitation: Option<ExcitationWarning>,
}

/// Levenberg–Marquardt on `(JᵀΣ⁻¹J + λI) δ = −JᵀΣ⁻¹r`, with `λ` divided by
/// `damping_scale` on accepted steps and multiplied on rejected ones.
pub fn minimize(
    x0: &CalibrationState,
    windows: &[FactorWindow],
    cfg: &SolverConfig,
) -> Result<MinimizeOutcome> {
    let info = cfg.information()?;
    let mut x = *x0;
    let mut lin = linearize_all(&x, windows, &info)?;
    let mut accepted_costs = vec![lin.cost];
    let mut lambda = cfg.damping_init;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iterations {
        if lin.gradient.amax() < cfg.abs_tol || lin.cost == 0.0 {
            converged = true;
            break;
        }
        if lambda > MAX_DAMPING {
            // no descent step left at machine precision
            converged = true;
            break;
        }
        iterations += 1;
        let damped = lin.hessian + Hessian::identity() * lambda;
        let Some(chol) = Cholesky::new(damped) else {
            lambda *= cfg.damping_scale;
            continue;
        };
        let step = chol.solve(&(-lin.gradient));
        let candidate = CalibrationState::from_vector(&(x.to_vector() + step));
        let new_cost = match cost_only(&candidate, windows, &info) {
            Ok(c) if c.is_finite() => c,
            _ => {
                lambda *= cfg.damping_scale;
                continue;
            }
        };
        if new_cost <= lin.cost {
            let decrease = (lin.cost - new_cost) / lin.cost;
            x = candidate;
            lin = linearize_all(&x, windows, &info)?;
            accepted_costs.push(lin.cost);
            lambda = (lambda / cfg.damping_scale).max(f64::MIN_POSITIVE);
            if decrease < cfg.rel_tol {
                converged = true;
                break;
            }
        } else {
            lambda *= cfg.damping_scale;
        }
    }

    Ok(MinimizeOutcome {
        state: x,
        cost: lin.cost,
        iterations,
        converged,
        accepted_costs,
        excitation: excitation_diagnostic(&lin.hessian),
    })
}

/// Batch estimate over all factors at once.
pub fn solve_batch(
    windows: &[FactorWindow],
    cfg: &SolverConfig,
    x0: &CalibrationState,
) -> Result<CalibrationResult> {
    if windows.len() < MIN_BATCH_WINDOWS {
        return Err(Error::InsufficientWindows {
            needed: MIN_BATCH_WINDOWS,
            got: windows.len(),
        });
    }
    let out = minimize(x0, windows, cfg)?;
    let mut result = CalibrationResult::from_state(&out.state, out.cost, out.iterations, out.converged)?;
    result.excitation = out.excitation;
    Ok(result)
}

/// Report from a single incremental update.
#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    pub excitation: Option<ExcitationWarning>,
}

/// Online estimator: one factor in, a few warm-started steps out.
#[derive(Debug, Clone)]
pub struct IncrementalEstimator {
    state: CalibrationState,
    windows: Vec<FactorWindow>,
    history: Vec<CalibrationState>,
    config: SolverConfig,
    total_iterations: usize,
    last: Option<UpdateReport>,
}

impl IncrementalEstimator {
    pub fn new(config: SolverConfig) -> Result<Self> {
        Self::with_initial_state(config, CalibrationState::identity())
    }

    pub fn with_initial_state(config: SolverConfig, state: CalibrationState) -> Result<Self> {
        config.information()?;
        if !state.is_finite() {
            return Err(Error::NonFinite("initial state"));
        }
        Ok(IncrementalEstimator {
            state,
            windows: Vec::new(),
            history: Vec::new(),
            config,
            total_iterations: 0,
            last: None,
        })
    }

    /// Appends one factor and re-optimizes from the current estimate.
    pub fn add(&mut self, win: FactorWindow) -> Result<&UpdateReport> {
        if ![win.m, win.m_dot, win.w].iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("factor window"));
        }
        self.windows.push(win);
        let out = minimize(&self.state, &self.windows, &self.config)?;
        self.state = out.state;
        self.history.push(out.state);
        self.total_iterations += out.iterations;
        self.last = Some(UpdateReport {
            iterations: out.iterations,
            converged: out.converged,
            cost: out.cost,
            excitation: out.excitation,
        });
        Ok(self.last.as_ref().expect("just set"))
    }

    pub fn state(&self) -> &CalibrationState {
        &self.state
    }

    pub fn history(&self) -> &[CalibrationState] {
        &self.history
    }

    pub fn windows(&self) -> &[FactorWindow] {
        &self.windows
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn last_update(&self) -> Option<&UpdateReport> {
        self.last.as_ref()
    }

    /// The latest estimate, expanded.
    pub fn current(&self) -> Result<CalibrationResult> {
        let cost = if self.windows.is_empty() {
            0.0
        } else {
            objective(&self.state, &self.windows, &self.config)?
        };
        let last = self.last.as_ref();
        let mut r = CalibrationResult::from_state(
            &self.state,
            cost,
            self.total_iterations,
            last.is_some_and(|u| u.converged),
        )?;
        r.excitation = last.and_then(|u| u.excitation.clone());
        Ok(r)
    }
}

pub const MIN_TAIL_HISTORY: usize = 5;

/// Component-wise mean of the trailing `tail_fraction` of the history.
pub fn tail_average(history: &[CalibrationState], tail_fraction: f64) -> Result<CalibrationState> {
    if history.len() < MIN_TAIL_HISTORY {
        return Err(Error::InsufficientHistory {
            needed: MIN_TAIL_HISTORY,
            got: history.len(),
        });
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tail fraction {tail_fraction} outside (0, 1]"
        )));
    }
    let n = history.len();
    let k = ((tail_fraction * n as f64).round() as usize).clamp(1, n);
    let sum: StateVector = history[n - k..].iter().map(|s| s.to_vector()).sum();
    Ok(CalibrationState::from_vector(&(sum / k as f64)))
}

/// Estimate reported by the online method: the mean of the last
/// `tail_fraction` of the per-update estimates.
pub fn final_estimate(est: &IncrementalEstimator, tail_fraction: f64) -> Result<CalibrationResult> {
    let x = tail_average(est.history(), tail_fraction)?;
    let cost = objective(&x, est.windows(), est.config())?;
    let last = est.last_update();
    let mut r = CalibrationResult::from_state(
        &x,
        cost,
        est.total_iterations,
        last.is_some_and(|u| u.converged),
    )?;
    r.excitation = last.and_then(|u| u.excitation.clone());
    Ok(r)
}

/// First history index at which each parameter block settled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvergenceIndices {
    pub soft_iron: Option<usize>,
    pub hard_iron: Option<usize>,
    pub gyro_bias: Option<usize>,
}

fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = norm(&diff);
    if d == 0.0 {
        return 0.0;
    }
    d / norm(a).max(norm(b))
}

fn first_settled(blocks: &[Option<Vec<f64>>], window: usize, rel_tol: f64) -> Option<usize> {
    if window == 0 || blocks.len() < window {
        return None;
    }
    (window - 1..blocks.len()).find(|&end| {
        let span = &blocks[end + 1 - window..=end];
        span.iter().all(Option::is_some)
            && span.iter().enumerate().all(|(i, a)| {
                span[i + 1..].iter().all(|b| {
                    relative_deviation(a.as_ref().expect("checked"), b.as_ref().expect("checked"))
                        < rel_tol
                })
            })
    })
}

/// Earliest index at which every pair of estimates in the trailing `window`
/// agrees to `rel_tol` (relative, in block norm). The soft-iron block is
/// compared through the expanded matrix `C`, the others directly.
pub fn detect_convergence(history: &[CalibrationState], window: usize, rel_tol: f64) -> ConvergenceIndices {
    let soft: Vec<Option<Vec<f64>>> = history
        .iter()
        .map(|s| {
            cholesky_factor(&s.l, DEFAULT_OVERFLOW_BOUND)
                .ok()
                .map(|l| vec3x3(&(l * l.transpose())).iter().copied().collect())
        })
        .collect();
    let hard: Vec<Option<Vec<f64>>> = history
        .iter()
        .map(|s| Some(s.pseudo_hard_iron.iter().copied().collect()))
        .collect();
    let gyro: Vec<Option<Vec<f64>>> = history
        .iter()
        .map(|s| Some(s.gyro_bias.iter().copied().collect()))
        .collect();
    ConvergenceIndices {
        soft_iron: first_settled(&soft, window, rel_tol),
        hard_iron: first_settled(&hard, window, rel_tol),
        gyro_bias: first_settled(&gyro, window, rel_tol),
    }
}
