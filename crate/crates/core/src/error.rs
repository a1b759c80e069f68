use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("regular subgraph is not connected")]
    Disconnected,

    #[error("no Byzantine assignment with a connected regular subgraph after {attempts} attempts")]
    AssignmentExhausted { attempts: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix has no nonzero singular value")]
    ZeroMatrix,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite model at agent {agent} in round {round}")]
    NonFinite { agent: usize, round: usize },

    #[error("update of agent {agent} produced a non-finite value")]
    NonFiniteUpdate { agent: usize },

    #[error("zero-sum attack invoked for receiver {receiver} with no Byzantine neighbors")]
    NoByzantineNeighbor { receiver: usize },

    #[error("{what} did not converge within {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("gradients do not sum to zero (max coordinate sum {0:e}); reference point is not the optimum")]
    NotOptimal(f64),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
