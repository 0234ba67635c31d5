use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("sparse view: {in_window} points in window, need at least {required}")]
    SparseView { in_window: usize, required: usize },

    #[error("pose in collision at ({x:.3}, {y:.3})")]
    PoseInCollision { x: f64, y: f64 },

    #[error("no feasible path: {0}")]
    NoFeasiblePath(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint error in field `{field}`: {detail}")]
    Checkpoint { field: String, detail: String },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (diagnostic snapshot: {snapshot:?})")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        step: usize,
        snapshot: Option<PathBuf>,
    },

    #[error("io error on {path:?}: {source}")]
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

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            detail: detail.into(),
        }
    }
}
