// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Errors produced by routelens.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands had incompatible shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A matrix or vector contained NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Input violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A checkpoint tensor could not be read or validated.
    #[error("checkpoint tensor `{tensor}`: {reason}")]
    Checkpoint { tensor: String, reason: String },

    /// The container itself (header, framing) is malformed.
    #[error("checkpoint container {path}: {reason}")]
    Container { path: PathBuf, reason: String },

    /// Tokenizer files or encoding failures.
    #[error("tokenizer: {0}")]
    Tokenizer(String),

    /// Configuration error (missing key, unknown family, bad flag value).
    #[error("config: {0}")]
    Config(String),

    /// Data-dependent failure (empty corpus after filtering, missing spans).
    #[error("data: {0}")]
    Data(String),

    /// A recording that an analysis needs was not captured in the trace.
    #[error("trace does not contain `{0}`; enable it in the Recording")]
    NotRecorded(&'static str),

    /// Numerical degeneracy (zero vector, rank deficiency where rank is required).
    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub(crate) fn checkpoint(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Checkpoint { tensor: tensor.into(), reason: reason.into() }
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
