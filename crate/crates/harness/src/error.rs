use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("missing checkpoint {}: run `coupled train` first or unset require_checkpoints", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("input mismatch: {0}")]
    InputMismatch(String),

    #[error(transparent)]
    Core(#[from] coupled_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Process exit codes by error class.
pub mod exit {
    pub const CONFIG: i32 = 2;
    pub const CHECKPOINT: i32 = 3;
    pub const DATA: i32 = 4;
    pub const NUMERIC: i32 = 5;
    pub const IO: i32 = 6;
    pub const INTERNAL: i32 = 70;
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        use coupled_core::Error as E;
        match self {
            HarnessError::Config { .. } => exit::CONFIG,
            HarnessError::MissingCheckpoint(_) => exit::CHECKPOINT,
            HarnessError::InputMismatch(_) => exit::INTERNAL,
            HarnessError::Core(e) => match e {
                E::Config(_) => exit::CONFIG,
                E::Checkpoint(_) => exit::CHECKPOINT,
                E::Dataset(_) | E::Json(_) => exit::DATA,
                E::NonFinite { .. } | E::Diverged { .. } => exit::NUMERIC,
                E::Io(_) => exit::IO,
                E::Shape(_) | E::Timestep { .. } | E::StaleTape | E::ActionStream(_) => exit::INTERNAL,
            },
            HarnessError::Io(_) => exit::IO,
            HarnessError::Csv(_) | HarnessError::Json(_) => exit::DATA,
        }
    }

    /// Short class name printed next to the message.
    pub fn class(&self) -> &'static str {
        match self.exit_code() {
            exit::CONFIG => "config",
            exit::CHECKPOINT => "checkpoint",
            exit::DATA => "data",
            exit::NUMERIC => "numeric",
            exit::IO => "io",
            _ => "internal",
        }
    }
}
