use std::path::PathBuf;

use crate::config::ConfigError;
use crate::format::FormatError;
use crate::pipeline::Stage;

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] lori_core::Error),
    #[error("stage `{stage}` failed (config {config_hash}): {source}")]
    Stage { stage: Stage, config_hash: String, source: Box<HarnessError> },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Format(_) | HarnessError::Io { .. } => EXIT_DATA,
            HarnessError::Core(e) => match e {
                lori_core::Error::Argument(_) => EXIT_CONFIG,
                lori_core::Error::Training { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
            HarnessError::Stage { source, .. } => source.exit_code(),
        }
    }
}
