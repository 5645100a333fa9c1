//! Error type shared by every module in the crate.
//!
//! Errors are grouped so the command line layer can map them onto stable
//! process exit codes: configuration problems, data problems and training
//! divergence each get their own code, everything else is an internal bug.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes passed to an operation do not line up.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An input value lies outside the documented domain of an operation
    /// (e.g. `log` of a non-positive number).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An API contract was violated (e.g. backprop from a non-scalar node).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed, empty or otherwise unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint or cache file failed validation (magic, version, size).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss and cannot continue.
    #[error("training diverged: {0}")]
    Divergence(String),

    /// Underlying file system failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error. `0` is reserved for success:
    /// configuration errors exit with 2, data/file errors with 3 and
    /// training divergence with 4. Internal bugs map to 1.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => 3,
            Error::Divergence(_) => 4,
            Error::Dimension { .. } | Error::Domain { .. } | Error::Contract(_) => 1,
        }
    }
}
