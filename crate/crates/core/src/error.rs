use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("timestamp {t} outside period [{start}, {end})")]
    OutOfPeriod { t: i64, start: i64, end: i64 },

    #[error("keys must be strictly increasing: {0}")]
    Ordering(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("trusted region budget exceeded: requested {requested} bytes with {used} of {budget} in use ({what})")]
    BudgetExceeded {
        what: String,
        requested: u64,
        used: u64,
        budget: u64,
    },

    #[error("logic error: {0}")]
    Logic(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("handshake rejected: {0}")]
    Handshake(String),

    #[error("sealed data rejected: {0}")]
    SealedData(String),

    #[error("session expired")]
    SessionExpired,

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the `pct` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Protocol(_)
            | Error::Handshake(_)
            | Error::SealedData(_)
            | Error::SessionExpired => 3,
            Error::BudgetExceeded { .. } | Error::Config(_) => 4,
            Error::Format(_) | Error::Integrity(_) => 2,
            Error::InvalidInput(_)
            | Error::Parse { .. }
            | Error::OutOfPeriod { .. }
            | Error::Ordering(_)
            | Error::Logic(_) => 1,
        }
    }
}
