use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("grid mismatch: fields live on different spectra")]
    GridMismatch,

    #[error("spectrum invariant violated: {0}")]
    SpectrumInvariant(String),

    #[error("orthonormality violated: pair ({j}, {k}) has residual {residual:e}")]
    Orthonormality { j: usize, k: usize, residual: f64 },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("Potential nonnegativity violated: sample {index} is {value}")]
    NegativePotential { index: usize, value: f64 },

    #[error("incompatible source for V = 0: mean pairing (f, 1) = {mean:e} exceeds 1e-10")]
    IncompatibleSource { mean: f64 },

    #[error("factorization failed (condition estimate {condition_estimate:e})")]
    Factorization { condition_estimate: f64 },

    #[error("solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    Residual { residual: f64, tolerance: f64 },

    #[error("source supported outside region: |f| = {value:e} at grid point {index}")]
    SupportViolation { index: usize, value: f64 },

    #[error("rank deficient: numerical rank {rank} of {requested}")]
    RankDeficient { rank: usize, requested: usize },

    #[error("incompatible bundles: {0}")]
    BundleMismatch(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
