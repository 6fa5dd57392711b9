use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("adapter on layer `{layer}`: {reason}")]
    Adapter { layer: String, reason: String },

    #[error("no layers matched the adapter target filter")]
    NoAdaptedLayers,

    #[error("privacy: {0}")]
    Privacy(String),

    #[error("privacy budget exhausted after {steps} steps: epsilon {spent:.4} would exceed target {target:.4}")]
    BudgetExhausted { steps: u64, spent: f64, target: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged in stage `{stage}` at step {step}: loss {loss}")]
    Diverged { stage: String, step: usize, loss: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
