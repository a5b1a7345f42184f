//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input, bad config, missing file: the caller can fix it.
    User,
    /// Invariant violation inside the library.
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("input too short: need at least {need} samples, got {got}")]
    InputTooShort { need: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported sample rate: expected {expected} Hz, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },

    #[error("unsupported audio format: {0}")]
    AudioFormat(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("missing loss term `{0}` for the requested stage")]
    MissingTerm(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing prerequisite checkpoint: {0}")]
    MissingPrerequisite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {message}")]
    Wav { path: String, message: String },

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Internal(_) | Error::Diverged(_) | Error::NonFinite(_) => ErrorKind::Internal,
            _ => ErrorKind::User,
        }
    }
}
