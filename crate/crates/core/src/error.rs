use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<u64> },

    #[error("symmetric eigendecomposition did not converge (n={n}, max|G|={max_abs:e})")]
    EigenConvergence { n: usize, max_abs: f64 },

    #[error("matrix is not positive semidefinite: lambda_min={min:e}, lambda_max={max:e}")]
    NotPositiveSemidefinite { min: f64, max: f64 },

    #[error("ill-conditioned extension: eigenvalue {eigenvalue:e} of mode {index} is below {threshold:e}")]
    IllConditioned {
        index: usize,
        eigenvalue: f64,
        threshold: f64,
    },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("missing checkpoint at t={0}")]
    MissingCheckpoint(u64),

    #[error("i/o error on {path}{}: {source}", step.map(|s| format!(" (step {s})")).unwrap_or_default())]
    Io {
        path: PathBuf,
        step: Option<u64>,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            step: None,
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::NonFinite { .. } => "non_finite",
            Error::EigenConvergence { .. } => "eigen_convergence",
            Error::NotPositiveSemidefinite { .. } => "not_psd",
            Error::IllConditioned { .. } => "ill_conditioned",
            Error::ZeroVector => "zero_vector",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Image { .. } => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
