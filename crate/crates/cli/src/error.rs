use std::io;
use std::path::{Path, PathBuf};

use svkit::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{stage}: {source}")]
    Stage { stage: String, source: svkit::Error },

    #[error("workdir {} is in use (lock file {} exists)", .0.display(), .0.join(crate::run::LOCK_FILE).display())]
    Locked(PathBuf),

    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn config(line: usize, msg: impl Into<String>) -> Self {
        CliError::Config { line, msg: msg.into() }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Io { .. } | CliError::Locked(_) | CliError::Data(_) => 2,
            CliError::Stage { source, .. } => match source.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

/// Attaches a stage name to core errors.
pub trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T, CliError>;
}

impl<T> StageContext<T> for svkit::Result<T> {
    fn stage(self, stage: &str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage {
            stage: stage.to_string(),
            source,
        })
    }
}
