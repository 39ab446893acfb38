//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the library.
///
/// Each variant maps to a stable machine-readable kind string (see
/// [`Error::kind`]) used by the CLI for single-line diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor or layer shapes. Names both offending shapes.
    #[error("shape mismatch in {context}: {left} vs {right}")]
    Shape {
        context: String,
        left: String,
        right: String,
    },

    /// Topology-string syntax error with the byte offset of the offending token.
    #[error("parse error at byte {offset}: expected {expected}, found {found}")]
    Parse {
        offset: usize,
        expected: String,
        found: String,
    },

    /// Invalid configuration value (hyperparameters, task specs, periods).
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a documented precondition (row sums, one-hot labels).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary file (bad magic, version, or truncation) at a byte offset.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Operation applied to a stream or trainer in the wrong state.
    #[error("state error: {0}")]
    State(String),

    /// Bug guard: mismatched cache/model pairs and similar internal violations.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable lowercase kind tag, one per variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Format { .. } => "format",
            Error::State(_) => "state",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(context: impl Into<String>, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.into(),
            right: right.into(),
        }
    }
}
