//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A value fails an operation's precondition (non-finite input, empty
    /// batch, shape mismatch, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration violates a cross-field constraint or contains an
    /// unknown key.
    #[error("configuration error: {0}")]
    Config(String),

    /// A serialized artifact (packed latents, checkpoint) is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Two artifacts cannot be used together (e.g. tokenizer/AR checkpoint
    /// channel mismatch).
    #[error("compatibility error: {0}")]
    Compat(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// `true` for errors a caller caused by passing bad inputs or configs
    /// (as opposed to runtime failures). The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Config(_) | Error::Compat(_))
    }
}
