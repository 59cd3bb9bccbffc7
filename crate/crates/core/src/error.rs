use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sequence or operator belongs to a different configuration")]
    ConfigurationMismatch,

    #[error("configuration has no sites")]
    EmptyConfiguration,

    #[error("no convergence after {iterations} iterations (last increment {increment:e})")]
    NonConvergence { iterations: usize, increment: f64 },

    #[error("path {path} blew up at site {site} (step {step})")]
    BlowUp { path: usize, site: usize, step: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
