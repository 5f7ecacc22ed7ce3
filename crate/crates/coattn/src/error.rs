use std::path::PathBuf;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A configuration value violates its documented constraints.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller broke an API contract (e.g. non-scalar loss, empty batch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A binary file is malformed. `offset` is the byte position where
    /// parsing failed, when known.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Structurally valid data that fails cross-referencing checks.
    #[error("validation error: {0}")]
    Validation(String),

    /// Mathematically degenerate input (zero-norm vector, empty set).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss and was aborted.
    #[error("training aborted at step {step}: non-finite loss {loss}")]
    TrainingAborted { step: usize, loss: f64 },
}

impl Error {
    pub fn dimension(op: &'static str, lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.into(),
            rhs: rhs.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
