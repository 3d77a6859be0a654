//! Error type shared across the crate, with a stable mapping to CLI exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweetError {
    /// Tensor/matrix extents do not line up for an operation.
    #[error("shape error in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A weight matrix does not match the shape implied by the layout.
    #[error("layout error for {role}: expected {expected}, got {got}")]
    Layout {
        role: String,
        expected: String,
        got: String,
    },

    /// Invalid argument outside of shape/layout concerns.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An API contract was violated (e.g. non-scalar loss for backward).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or a failing numeric check.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed on-disk data (bad magic, truncation, inconsistent directory).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Requested operation exceeds what the source artifact can provide.
    #[error("capability error: {0}")]
    Capability(String),

    /// Evaluation protocol violation (mismatched budgets, too few strategies).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Bad command-line usage.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SweetError {
    /// Exit code contract: 0 success, 2 usage, 3 format, 4 numeric, 5 capability.
    /// Other failures map to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            SweetError::Usage(_) => 2,
            SweetError::Format { .. } => 3,
            SweetError::Numeric(_) => 4,
            SweetError::Capability(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, SweetError>;
