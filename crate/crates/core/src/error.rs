use std::path::PathBuf;

/// Errors raised by the modelling, data and evaluation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad weights, incongruent tower shapes, bad simulator rates.
    #[error("configuration error: {0}")]
    Config(String),

    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// An API was driven in the wrong order, e.g. backward with a cache from another network.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label hierarchy violated at sample {index}: {detail}")]
    Hierarchy { index: usize, detail: String },

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    /// Training hit a non-finite loss. `last_good` holds the parameters from
    /// before the offending step.
    #[error("training aborted at step {step}: {reason}")]
    Training {
        step: usize,
        reason: String,
        last_good: Option<Box<crate::model::Model>>,
    },

    #[error("metric unavailable: {0}")]
    Metric(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
