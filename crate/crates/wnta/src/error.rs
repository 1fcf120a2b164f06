//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by validation, numerics and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("diameter must be positive, got {0} m")]
    NonPositiveDiameter(f64),

    #[error("invalid physical context: {0}")]
    InvalidContext(String),

    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid ensemble spec: {0}")]
    InvalidEnsemble(String),

    #[error("intensity must be strictly positive, pixel ({x}, {y}) is {value}")]
    NonPositiveIntensity { x: u32, y: u32, value: f64 },

    #[error("image dimensions differ: {a_width}x{a_height} vs {b_width}x{b_height}{}",
            pair.map(|(i, j)| format!(" (particles {i} and {j})")).unwrap_or_default())]
    DimensionMismatch {
        a_width: u32,
        a_height: u32,
        b_width: u32,
        b_height: u32,
        pair: Option<(u64, u64)>,
    },

    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { got: usize, need: usize },

    #[error("recentering offset shifts frame {frame} fully out of the field")]
    ShiftOutOfFrame { frame: usize },

    #[error("max_lag {max_lag} must be at least 1 and below track length {len}")]
    BadLagRange { max_lag: usize, len: usize },

    #[error("fit needs between 2 and {available} lags, requested {requested}")]
    BadFitLags { requested: usize, available: usize },

    #[error("particle {0} has no noise variance; run noise estimation first")]
    MissingEpsilon(u64),

    #[error("weight exponent must be non-negative, got {0}")]
    NegativeExponent(f64),

    #[error("weight matrix is {got} x {got}, expected {expected} x {expected}")]
    WeightSizeMismatch { expected: usize, got: usize },

    #[error("sweep grid is empty")]
    EmptySweep,

    #[error("SNR model fit needs at least {need} points with distinct SNR, got {got}")]
    TooFewSnrPoints { got: usize, need: usize },

    #[error("no valid size estimates")]
    AllInvalid,

    #[error("particle ids do not match between inputs; orphans: {0:?}")]
    IdMismatch(Vec<u64>),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: malformed {format} data at line {line}: {message}")]
    Parse {
        path: PathBuf,
        format: &'static str,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
