use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid timestep {t}: {reason}")]
    Timestep { t: usize, reason: String },

    #[error("stale tape: parameters changed since the forward pass")]
    StaleTape,

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("training diverged at step {step}; last good checkpoint retained")]
    Diverged {
        step: usize,
        last_good: Box<crate::denoisers::DenoiserBundle>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed action stream: {0}")]
    ActionStream(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
