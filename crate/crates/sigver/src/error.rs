use std::io;
use std::path::{Path, PathBuf};

/// Errors of the file-backed pipeline, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] sigver_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    /// Malformed content; `line` counts sample rows from 1, after any header.
    #[error("{}: {message} at line {line}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        AppError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// 1 validation or usage, 2 I/O, 3 protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(sigver_core::Error::Protocol(_)) => 3,
            AppError::Io { .. } => 2,
            _ => 1,
        }
    }
}
