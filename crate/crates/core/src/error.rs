use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("graph is disconnected: agent {unreachable} cannot be reached from agent 0")]
    DisconnectedGraph { unreachable: usize },

    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),

    #[error("index {index} out of range for size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("no available gossip pair: every free agent has only engaged neighbors")]
    NoAvailablePair,

    #[error("non-finite gradient entry at coordinate {coord}")]
    NonFiniteGradient { coord: usize },

    #[error("non-finite state for agent {agent} at coordinate {coord}")]
    NonFiniteState { agent: usize, coord: usize },

    #[error("trial {trial}, chain {chain} diverged at cycle {cycle}: {source}")]
    Diverged {
        trial: usize,
        chain: usize,
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate samples: {0}")]
    DegenerateSamples(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("series value at k={k} is not positive ({value})")]
    NonPositiveValues { k: usize, value: f64 },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error("validation error at `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("malformed row at {path}:{line}: {message}")]
    MalformedRow {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing subject file: {0}")]
    MissingSubjectFile(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
