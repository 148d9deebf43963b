use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("negative density at pixel ({row}, {col}): {value}")]
    NegativeDensity { row: usize, col: usize, value: f64 },

    /// All-zero or otherwise non-normalizable input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("scene class infeasible: {0}")]
    Infeasible(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Two evaluations that must agree did not.
    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI and the Python bindings.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::Domain(_) => "domain",
            Error::Shape { .. } => "shape",
            Error::NegativeDensity { .. } => "negative_density",
            Error::Degenerate(_) => "degenerate",
            Error::Infeasible(_) => "infeasible",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Consistency(_) => "consistency",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
