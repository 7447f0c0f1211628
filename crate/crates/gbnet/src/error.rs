//! Crate-wide error type.
//!
//! CLI exit codes map onto these variants: usage/parse problems exit 2,
//! data/shape problems exit 3, numeric failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GbError {
    /// Tensor or head dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A bounding box is outside [0,1] or inverted.
    #[error("malformed box: {0}")]
    MalformedBox(String),

    /// A text input could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A relation or label is not in the declared vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Run or model configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A required input is missing or invalid.
    #[error("input error: {0}")]
    Input(String),

    /// An operation was called in the wrong state (e.g. backprop on an empty tape).
    #[error("state error: {0}")]
    State(String),

    /// A binary or structured file violates its format.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced NaN/Inf or an otherwise unusable number.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GbError>;

impl GbError {
    /// Process exit code for the CLI: 2 usage/parse, 3 data/shape, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            GbError::Parse { .. } | GbError::Vocabulary(_) | GbError::Config(_) => 2,
            GbError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
