use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the forward model or the reduction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input data: {0}")]
    InvalidInput(String),

    #[error("quadrature did not converge (estimated error {estimate:e})")]
    Quadrature { estimate: f64 },

    #[error("optimizer did not converge after {iterations} iterations (chi2 = {chi2})")]
    NonConvergence { iterations: usize, chi2: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("ambiguous peak matching: {0}")]
    AmbiguousMatch(String),

    #[error("quality gate failed: {0}")]
    Gate(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("JSON error on {path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl Error {
    /// Process exit code for the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::Json { .. } | Error::Csv { .. } => 2,
            Error::NonConvergence { .. } | Error::Quadrature { .. } | Error::Singular(_) => 3,
            Error::Io { .. } => 4,
            Error::Domain(_) | Error::AmbiguousMatch(_) | Error::Gate(_) => 3,
        }
    }

    /// Short machine-readable tag used in error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Quadrature { .. } => "quadrature",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Singular(_) => "singular",
            Error::AmbiguousMatch(_) => "ambiguous_match",
            Error::Gate(_) => "gate",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Json { .. } => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
