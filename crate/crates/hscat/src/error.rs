//! Crate-wide error type with the process exit-code policy.

use std::path::PathBuf;

/// Exit codes used by the CLI: 0 success, 2 validation, 3 numerical.
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum HscatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("container format: {0}")]
    Format(String),
    #[error("payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("unsupported container major version {major} (supported: {supported})")]
    Version { major: u16, supported: u16 },
}

impl HscatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HscatError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        HscatError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        HscatError::Numerical(msg.into())
    }

    /// Process exit code this error maps to.
    pub fn exit_code(&self) -> u8 {
        match self {
            HscatError::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        }
    }
}

pub type Result<T> = std::result::Result<T, HscatError>;
