// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the tensor kernel, the model, and the analysis pipeline.
#[derive(Debug, Error)]
pub enum KnError {
    /// Incompatible tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Out-of-range index (token id, neuron id, target class).
    #[error("index error: {0}")]
    Index(String),

    /// A caller broke an operation's contract (non-scalar loss, empty batch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed cloze query (missing or repeated mask, bad answer).
    #[error("query error: {0}")]
    Query(String),

    /// An answer that does not fit a single mask token.
    #[error("multi-token answer: {0}")]
    MultiToken(String),

    /// Invalid editing request.
    #[error("request error: {0}")]
    Request(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl KnError {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            KnError::Dimension(_) => "dimension",
            KnError::Index(_) => "index",
            KnError::Contract(_) => "contract",
            KnError::Config(_) => "config",
            KnError::Query(_) => "query",
            KnError::MultiToken(_) => "multi_token",
            KnError::Request(_) => "request",
            KnError::Divergence { .. } => "divergence",
            KnError::Format(_) => "format",
            KnError::Io(_) => "io",
            KnError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, KnError>;
