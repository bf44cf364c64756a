use alloc::string::String;
use core::fmt;

/// Errors raised by the adapter library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform.
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An argument is outside its valid domain.
    Argument(String),
    /// An object is not in the state the operation requires.
    State(String),
    /// Training produced a non-finite loss.
    Training { step: usize, loss: f64 },
    /// Adapters cannot be combined.
    Merge(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => write!(
                f,
                "dimension mismatch in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Training { step, loss } => {
                write!(f, "non-finite loss {loss} at training step {step}")
            }
            Error::Merge(msg) => write!(f, "merge error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
