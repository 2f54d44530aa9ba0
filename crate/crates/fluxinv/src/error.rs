use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Numerical routines distinguish domain violations (bad inputs), parameter
/// violations (outside stated ranges), and conditioning failures (a
/// factorization that should exist numerically does not). File loaders
/// report the offending path and, where known, the 1-based line.
#[derive(Debug, Error)]
pub enum FluxError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("conditioning error: {0}")]
    Conditioning(String),

    #[error("improper density: {0}")]
    Improper(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sampler error: {0}")]
    Sampler(String),

    #[error("{path}:{}: {msg}", line.map(|l| l.to_string()).unwrap_or_else(|| "?".into()))]
    Format {
        path: PathBuf,
        line: Option<u64>,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FluxError>;

impl FluxError {
    pub(crate) fn format(path: impl Into<PathBuf>, line: Option<u64>, msg: impl Into<String>) -> Self {
        FluxError::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
