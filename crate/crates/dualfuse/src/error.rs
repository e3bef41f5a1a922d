use std::path::{Path, PathBuf};

/// Errors from files, formats and configuration.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not a dualfuse checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: checkpoint format version {found}, this build reads {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: malformed {what}: {detail}")]
    Malformed { path: PathBuf, what: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("refusing to write into non-empty directory {0} (use --force)")]
    NotEmpty(PathBuf),
    #[error(transparent)]
    Core(#[from] dualfuse_core::Error),
}

impl FormatError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io { path: path.to_path_buf(), source }
    }

    pub fn malformed(path: &Path, what: &'static str, detail: impl Into<String>) -> Self {
        FormatError::Malformed { path: path.to_path_buf(), what, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;
