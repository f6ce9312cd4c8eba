//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChimeraError {
    /// Invalid configuration: bad shapes, dimensions, ratios, missing keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-range data (labels, token ids, spans).
    #[error("data error: {0}")]
    Data(String),

    /// A caller violated an internal contract (length/dimension mismatch
    /// between pipeline stages).
    #[error("contract error: {0}")]
    Contract(String),

    /// Expert invoked with the wrong domain, or for the no-expert class.
    #[error("routing contract error: {0}")]
    Routing(String),

    /// Asked for an expert view of a general-domain image (class 0 has none).
    #[error("no expert for the general domain: {0}")]
    NoExpert(String),

    /// Markup could not be parsed into a tree; byte offset included.
    #[error("parse error at byte {at}: {msg}")]
    Parse { at: usize, msg: String },

    /// Training produced a non-finite loss and aborted.
    #[error("numerical abort at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ChimeraError>;

impl ChimeraError {
    pub fn config(msg: impl Into<String>) -> Self {
        ChimeraError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        ChimeraError::Data(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        ChimeraError::Contract(msg.into())
    }
}
