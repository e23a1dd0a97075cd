use thiserror::Error;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("problem too large for the dense path: {0}")]
    TooLarge(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param_err(name: &str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}
