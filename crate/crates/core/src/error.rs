use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Geometry does not admit a unique answer (coincident points, parallel lines).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A delay spectrum without a peak above its leakage floor.
    #[error("unresolved: {0}")]
    Unresolved(String),

    /// A least-squares fit whose design matrix is rank deficient.
    #[error("unidentifiable: {0}")]
    Unidentifiable(String),

    /// Fisher information matrix is singular at the queried pose.
    #[error("unlocalizable pose: {0}")]
    UnlocalizablePose(String),

    /// Scenario validation failure; `key` names the offending entry.
    #[error("invalid scenario key `{key}`: {message}")]
    Scenario { key: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn scenario(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Scenario {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
