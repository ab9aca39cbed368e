use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An environment, buffer or trainer was configured with invalid values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a documented precondition (empty batch, bad distribution, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The environment was driven in a way it does not allow.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("soft value iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("training diverged at gradient step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("gradient identity check failed: {0}")]
    Verification(String),

    #[error("could not parse {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.to_string(),
        }
    }
}
