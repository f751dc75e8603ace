//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or out-of-range dimensions.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A precondition of an operation was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation produced NaN or Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Structural-knowledge template text that does not match the grammar.
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    /// A word that cannot be mapped to vocabulary ids.
    #[error("tokenization error: {0}")]
    Tokenize(String),

    /// A prompt longer than the model context.
    #[error("length error: {0}")]
    Length(String),

    /// Bad plan, pattern, or model configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Scene generation could not satisfy placement constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Malformed checkpoint or dataset files.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
