//! Crate-wide error type, grouped into the four classes the CLI maps to
//! exit codes: data, config, numeric, io.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Machine-parsable error class; each maps to a distinct CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Config,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn label(self) -> &'static str {
        match self {
            ErrorClass::Data => "DATA",
            ErrorClass::Config => "CONFIG",
            ErrorClass::Numeric => "NUMERIC",
            ErrorClass::Io => "IO",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Data => 2,
            ErrorClass::Config => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or insufficient input data (parse failures, empty sessions,
    /// missing sensors, too few samples for a fit).
    #[error("{0}")]
    Data(String),

    /// Inconsistent shapes, invalid parameters, unknown config keys.
    #[error("{0}")]
    Config(String),

    /// Non-finite values where finite ones are required, failed decompositions.
    #[error("{0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Data(_) => ErrorClass::Data,
            Error::Config(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
        }
    }
}
