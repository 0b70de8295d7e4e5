use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the bench.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    /// `backward` was called on a tensor that is not a scalar.
    NotScalar { shape: Vec<usize> },
    /// The tensor has no node on the tape it was asked about.
    NotRecorded,
    /// The trace no longer owns its tape.
    TapeConsumed,
    /// A relevance pass needed an activation the trace does not hold.
    MissingCache(String),
    /// The explanation method does not apply to this model family.
    NotApplicable { method: String, model: String },
    /// Generic precondition failure.
    InvalidInput(String),
    /// Training loss became non-finite.
    Divergence { epoch: usize },
    /// Malformed corpus/config row.
    Parse { line: usize, msg: String },
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, shapes } => write!(f, "shape mismatch in {op}: {shapes:?}"),
            Error::NotScalar { shape } => {
                write!(f, "backward root must be a scalar, got shape {shape:?}")
            }
            Error::NotRecorded => write!(f, "tensor is not recorded on this tape"),
            Error::TapeConsumed => write!(f, "trace tape was already consumed"),
            Error::MissingCache(what) => write!(f, "missing activation cache for {what}"),
            Error::NotApplicable { method, model } => {
                write!(f, "method {method} does not apply to {model} models")
            }
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Divergence { epoch } => write!(f, "training diverged (non-finite loss) at epoch {epoch}"),
            Error::Parse { line, msg } => write!(f, "line {line}: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
