use thiserror::Error;

use crate::trainer::LossBreakdown;

/// Errors raised by the laboratory's numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes or dimensions that do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// An object violates one of its structural invariants.
    #[error("structural error: {0}")]
    Structure(String),
    /// An API was called out of order or with stale state.
    #[error("usage error: {0}")]
    Usage(String),
    /// A training step produced a non-finite quantity.
    #[error("training error: {0}")]
    Training(String),
    /// A training step's blended loss was not finite; every term is kept.
    #[error("non-finite loss at chunk {}: {}", .0.chunk_k, .0.summary())]
    NonFinite(Box<LossBreakdown>),
    /// User-supplied configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data is degenerate for the requested analysis.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// Text input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
