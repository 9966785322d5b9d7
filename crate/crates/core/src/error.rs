use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum MsfError {
    /// Incompatible tensor shapes, naming both sides.
    #[error("shape mismatch: {op} expects {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (bad window size, empty scale list, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// I/O failure with the offending path attached.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint is readable but does not match the model.
    #[error("checkpoint incompatible:\n{report}")]
    CheckpointMismatch { report: String },

    /// Malformed binary file (bad magic, truncated payload, ...).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

impl MsfError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MsfError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MsfError>;
