use std::path::{Path, PathBuf};

use mou_core::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: mou_core::Error },

    #[error(transparent)]
    Core(#[from] mou_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Attach the file a core error came from.
    pub fn file(path: &Path, source: mou_core::Error) -> Self {
        CliError::File { path: path.to_path_buf(), source }
    }

    /// 2 bad config or input, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        let class = match self {
            CliError::Config(_) => ErrorClass::Config,
            CliError::Io { .. } => ErrorClass::Io,
            CliError::File { source, .. } | CliError::Core(source) => source.class(),
        };
        match class {
            ErrorClass::Config => 2,
            ErrorClass::Numerical => 3,
            ErrorClass::Io => 4,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}
