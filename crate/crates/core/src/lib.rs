//! Magnetometer hard/soft-iron and gyroscope bias calibration from angular
//! rates, without attitude knowledge.
//!
//! The residual `[w − w_b]× (C m − m_b) + C ṁ` vanishes for the true
//! parameters whatever the attitude, so windows of magnetometer and gyro
//! data can be fitted directly. [`solver::solve_batch`] fits all windows at
//! once and [`solver::IncrementalEstimator`] refines the estimate one window
//! at a time. [`runner`] ties these to the simulator, file formats and
//! metrics.

pub mod error;
pub mod io;
pub mod math;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use model::{CalibrationResult, CalibrationState, FactorWindow, SensorSample};
pub use solver::{solve_batch, IncrementalEstimator, SolverConfig};
