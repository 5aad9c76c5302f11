use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("metric map is empty")]
    EmptyMetrics,

    #[error("unknown memory entry {0}")]
    UnknownEntry(u64),

    #[error("expert count {k} outside [1, {experts}]")]
    InvalidExpertCount { k: usize, experts: usize },

    #[error("step size {eta} outside (0, 2/L) with L = {smoothness}")]
    InvalidStepSize { eta: f64, smoothness: f64 },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),

    #[error("parameter vector outside the box at coordinate {index}: {value} not in [{lower}, {upper}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("kernel factorization failed after jitter {jitter:e} on {points} points")]
    Factorization { jitter: f64, points: usize },

    #[error("population mismatch: {0}")]
    Population(String),

    #[error("environment evaluation failed: {0}")]
    Environment(String),

    #[error("{failed} of {total} experiment cells failed; first: {first}")]
    PartialRun { failed: usize, total: usize, first: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
