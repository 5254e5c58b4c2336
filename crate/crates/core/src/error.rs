// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every pipeline stage.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CueError>;

/// Errors produced by cuekit.
///
/// Variants are grouped by the stage that raises them; the CLI maps each
/// group onto an exit code.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum CueError {
    /// Underlying I/O failure, with the path that was being accessed.
    #[error("{path}: {source}")]
    Io {
        /// File or directory being accessed.
        path: PathBuf,
        /// Original error.
        #[source]
        source: std::io::Error,
    },

    /// A required input file does not exist.
    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    /// A text input could not be parsed.
    #[error("{path}:{line}: {reason}")]
    Parse {
        /// Source file.
        path: PathBuf,
        /// 1-based line number.
        line: usize,
        /// What went wrong.
        reason: String,
    },

    /// A binary file is shorter than its header promises.
    #[error("truncated file {path}: {reason}")]
    Truncated {
        /// Source file.
        path: PathBuf,
        /// What was expected.
        reason: String,
    },

    /// A record failed its CRC32 check.
    #[error("checksum mismatch in {path} at record {record}")]
    Checksum {
        /// Source file.
        path: PathBuf,
        /// 0-based record position.
        record: usize,
    },

    /// Data disagrees with its manifest or with another artifact.
    #[error("format mismatch: {0}")]
    Mismatch(String),

    /// Dimension mismatch between vectors or matrices.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dim {
        /// Expected size.
        expected: usize,
        /// Observed size.
        got: usize,
        /// Where it happened.
        context: &'static str,
    },

    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A label was requested that the artifact does not know.
    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    /// MI selection found no informative feature (total MI is zero).
    #[error("no informative features: total mutual information is 0")]
    NoInformativeFeatures,

    /// A computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A judge failed to score a response.
    #[error("judge {judge} failed: {reason}")]
    Judge {
        /// Judge identity.
        judge: String,
        /// Failure description.
        reason: String,
    },

    /// JSON (de)serialization failure.
    #[error("json error in {path}: {source}")]
    Json {
        /// Source file, or a placeholder for in-memory buffers.
        path: PathBuf,
        /// Original error.
        #[source]
        source: serde_json::Error,
    },
}

impl CueError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
