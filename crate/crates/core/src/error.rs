use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Shape or extent mismatch. The message names the offending shapes.
    Shape(String),
    /// A divisibility requirement (group width, patch size, ...) is violated.
    Divisibility(String),
    /// Autodiff misuse: non-scalar loss, repeated backward, stale handle.
    Autodiff(String),
    /// A value that must be finite is NaN or infinite.
    NonFinite(String),
    /// Malformed checkpoint or dataset file.
    Format(String),
    /// Training aborted (divergence, bad label, ...).
    Train(String),
    /// Invalid configuration.
    Config(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Divisibility(m) => write!(f, "divisibility error: {m}"),
            Error::Autodiff(m) => write!(f, "autodiff error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

impl Error {
    pub fn shape(op: &str, detail: impl fmt::Display) -> Self {
        Error::Shape(format!("{op}: {detail}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
