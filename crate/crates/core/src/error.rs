use std::path::PathBuf;

/// Errors raised anywhere in the segmentation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backward called on a graph that has already been consumed")]
    StaleGraph,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("volume format error in field `{field}`: {msg}")]
    Format { field: &'static str, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("could not place {organs} non-overlapping organs after {attempts} attempts")]
    Placement { organs: usize, attempts: usize },

    #[error("invalid configuration field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("case `{case_id}`: {msg}")]
    Data { case_id: String, msg: String },

    #[error("training aborted at step {step}: {msg}")]
    Aborted { step: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failure during work.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
