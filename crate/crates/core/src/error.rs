use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Arguments outside the operation's domain (dimension mismatch, unknown agent, non-finite input).
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical routine produced non-finite values or failed to converge.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Internal state is inconsistent, e.g. a stale or missing estimate buffer.
    #[error("state error: {0}")]
    State(String),
    /// Invalid configuration. Carries every violation found, each prefixed by its field path.
    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn ensure_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::domain(format!("{what}: expected dimension {want}, got {got}")));
    }
    Ok(())
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(format!("{what}: non-finite value")))
    }
}
