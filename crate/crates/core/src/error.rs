//! Error type shared across the crate.
//!
//! Errors are split into two broad kinds so callers (the CLI in particular)
//! can map them onto distinct exit codes: [`ErrorKind::Io`] for filesystem
//! trouble and [`ErrorKind::Validation`] for malformed or inconsistent data.

use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification of an error, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// The filesystem or the OS failed us.
    Io,
    /// The data was readable but wrong: bad shapes, bad manifests, bad values.
    Validation,
}

/// Unified error type for archive IO, numerics preconditions, and merging.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest at {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported manifest version {found} (expected {expected})")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("duplicate tensor name `{name}`")]
    DuplicateName { name: String },

    #[error("tensor `{name}`: {reason}")]
    BadTensor { name: String, reason: String },

    #[error(
        "tensor `{name}` does not fit its blob `{blob}`: offset {offset} + {len} bytes > blob size {blob_len}"
    )]
    OffsetOverflow { name: String, blob: String, offset: u64, len: u64, blob_len: u64 },

    #[error("blob `{blob}` failed its crc32 check (manifest {expected:#010x}, actual {actual:#010x})")]
    ChecksumMismatch { blob: String, expected: u32, actual: u32 },

    #[error("non-finite value in tensor `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("missing tensor `{name}` in archive")]
    MissingTensor { name: String },

    #[error("shape mismatch for `{name}`: expected {expected}, found {found}")]
    ShapeMismatch { name: String, expected: String, found: String },

    #[error("{context}: {reason}")]
    Invalid { context: String, reason: String },
}

impl CoreError {
    /// Convenience constructor for validation failures outside archive IO.
    pub fn invalid(context: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::Invalid { context: context.into(), reason: reason.into() }
    }

    /// Which coarse class this error belongs to.
    pub fn kind(&self) -> ErrorKind {
        match self {
            CoreError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}
