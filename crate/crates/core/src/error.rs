use std::io;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum MiaError {
    /// Input shapes or dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A NaN or infinity appeared, or training diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A configuration value violates its contract.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An operation received an empty (or single-class) input it cannot handle.
    #[error("insufficient input: {0}")]
    Input(String),
    /// Clustering collapsed to fewer clusters than requested.
    #[error("degenerate clustering: {0}")]
    Degenerate(String),
    #[error("malformed document: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MiaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Self::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Self::Numeric(msg.into())
    }
}

impl From<serde_json::Error> for MiaError {
    fn from(err: serde_json::Error) -> Self {
        Self::Format(err.to_string())
    }
}

impl From<toml::de::Error> for MiaError {
    fn from(err: toml::de::Error) -> Self {
        Self::Config(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MiaError>;
