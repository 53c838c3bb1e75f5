//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration: unknown keys, invalid values, schema violations.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid argument to a library operation (degenerate box, bad range, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Tensor or map shape mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A required file is missing on disk.
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    /// A persisted document declares a format version we do not understand.
    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// A persisted document exists but its contents cannot be decoded.
    #[error("malformed record: {0}")]
    Malformed(String),

    /// Generic dataset/checkpoint inconsistency.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss or other numeric breakdown during optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Shape(_) => 2,
            Error::MissingFile(_)
            | Error::VersionMismatch { .. }
            | Error::Malformed(_)
            | Error::Data(_)
            | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
