//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DetcoError>;

#[derive(Debug, Error)]
pub enum DetcoError {
    /// Bad caller input (shapes, counts, ranges).
    #[error("input error: {0}")]
    Input(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric contract violated (norms, finiteness).
    #[error("validation error: {0}")]
    Validation(String),

    /// Structural mismatch between parameter sets, checkpoints or configs.
    #[error("structural error: {0}")]
    Structure(String),

    /// Operation called in a state that cannot serve it (e.g. empty queue).
    #[error("state error: {0}")]
    State(String),

    /// An embedding collapsed to the zero vector before normalization.
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint container is malformed or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl DetcoError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DetcoError::Io {
            path: path.into(),
            source,
        }
    }

    /// One-line class label used by the CLI for exit reporting.
    pub fn class(&self) -> &'static str {
        match self {
            DetcoError::Input(_) => "input",
            DetcoError::Config(_) => "config",
            DetcoError::Validation(_) => "validation",
            DetcoError::Structure(_) => "structure",
            DetcoError::State(_) => "state",
            DetcoError::DegenerateEmbedding(_) => "degenerate-embedding",
            DetcoError::Io { .. } => "io",
            DetcoError::Checkpoint(_) => "checkpoint",
        }
    }
}
