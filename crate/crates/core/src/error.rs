//! Error taxonomy shared by the library and the CLI exit codes.

use std::fmt;

/// Engine-wide error type. The three variants map onto the CLI exit codes
/// (config = 2, data = 3, numeric = 4).
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration: bad shapes, illegal op/role pairings,
    /// unknown config keys, version mismatches.
    Config(String),
    /// Missing or malformed external data: files, manifests, genotypes.
    Data(String),
    /// Numeric divergence: non-finite values where finite ones are required.
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Error {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Error {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Error {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Error {
        Error::Data(e.to_string())
    }
}
