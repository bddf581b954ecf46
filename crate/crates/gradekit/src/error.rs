//! Shared error type and process exit-code mapping.

use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Geometry that cannot describe a valid volume or patch grid.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    /// A parameter outside its documented range (k = 0, negative spacing, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Index past the end of a grid, volume, or axis.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Tensor shapes that do not line up for an operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Bad or inconsistent configuration (missing class, empty split, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data: files, manifests, tables.
    #[error("data error: {0}")]
    Data(String),

    /// A DAG-schedule precondition was violated (e.g. parent not trained).
    #[error("scheduling error at location {location}: {message}")]
    Scheduling { location: usize, message: String },

    /// An internal contract that callers cannot trigger through valid input.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Unreadable or version-incompatible binary payload.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Process exit code: 0 success, 2 configuration, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidGeometry(_)
            | Error::InvalidParameter(_)
            | Error::IndexOutOfRange(_)
            | Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Format(_) => 3,
            Error::ShapeMismatch(_) | Error::Scheduling { .. } | Error::Contract(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
