use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    File { path: PathBuf, source: mrbev::Error },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] mrbev::Error),
}

impl CliError {
    /// 1 usage or configuration, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Io { .. } | CliError::Data(_) => 2,
            CliError::File { source, .. } | CliError::Core(source) => match source {
                mrbev::Error::InvalidConfig(_) => 1,
                mrbev::Error::Diverged { .. } | mrbev::Error::NonFinite(_) => 3,
                _ => 2,
            },
        }
    }
}

pub(crate) trait PathContext<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T> PathContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl<T> PathContext<T> for mrbev::Result<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|source| match source {
            mrbev::Error::Io(source) => CliError::Io {
                path: path.to_path_buf(),
                source,
            },
            source => CliError::File {
                path: path.to_path_buf(),
                source,
            },
        })
    }
}
