//! Crate-wide error type.
//!
//! Variants are grouped so that the command-line layer can map every failure
//! to one of three exit classes: usage errors, data/schema errors, and
//! numeric errors.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller misuse: bad arguments, invalid configuration, calling an
    /// operation in a state it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// Two operands with incompatible shapes. Always names both shapes.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// An index (token id, target id, utterance index, ...) outside its
    /// valid range.
    #[error("index error: {0}")]
    Index(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input that could not be parsed at all.
    #[error("parse error: {0}")]
    Parse(String),

    /// Well-formed input with invalid content (unknown enum value, wrong
    /// field count, inconsistent lengths).
    #[error("schema error: {0}")]
    Schema(String),

    /// Binary container violations: bad magic, version mismatch, truncation.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code class used by the CLI: 2 usage, 3 data/schema, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Shape { .. } => 2,
            Error::Index(_)
            | Error::Parse(_)
            | Error::Schema(_)
            | Error::Format(_)
            | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
