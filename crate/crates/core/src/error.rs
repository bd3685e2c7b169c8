use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a documented precondition or type invariant.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Rejection sampling gave up placing non-overlapping objects.
    #[error("frame {frame}: could not place object {object} without overlap after {attempts} attempts")]
    PlacementInfeasible {
        frame: usize,
        object: usize,
        attempts: usize,
    },

    #[error("exhaustive search needs {combinations} combinations, budget is {budget}; use the naive or mcmc solver")]
    BudgetExceeded { combinations: u128, budget: u128 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
