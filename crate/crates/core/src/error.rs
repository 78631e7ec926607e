use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite (eigenvalues {eigenvalues:?})")]
    NotPositiveDefinite { eigenvalues: [f64; 3] },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("determinant {det} is not 1 within {tolerance:e}")]
    DeterminantOutOfTolerance { det: f64, tolerance: f64 },

    #[error("cholesky parameter l{index} = {value} exceeds the overflow bound {bound}")]
    ParameterOverflow { index: usize, value: f64, bound: f64 },

    #[error("window length must be at least 2 samples, got {0}")]
    InvalidWindow(usize),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("need at least {needed} factor windows, got {got}")]
    InsufficientWindows { needed: usize, got: usize },

    #[error("need at least {needed} history entries, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("pitch {pitch_deg}° is too close to ±90°")]
    GimbalLock { pitch_deg: f64 },

    #[error("degenerate ellipsoid fit: design matrix is rank deficient")]
    DegenerateFit,

    #[error("unknown preset `{0}` (expected wam, mam or lam)")]
    UnknownPreset(String),

    #[error("unknown method `{0}` (expected bfg, ifg or ellipsoid)")]
    UnknownMethod(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: row {row}: timestamp {t} does not increase")]
    NonMonotoneTime { path: PathBuf, row: u64, t: f64 },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: &'static str },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
