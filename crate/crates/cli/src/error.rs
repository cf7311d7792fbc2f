use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Check(String),

    #[error("{0}")]
    Io(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: hsadapt::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) => 1,
            CliError::Io(_) => 3,
            CliError::Stage { source, .. } => match source {
                hsadapt::Error::Io(_) => 3,
                hsadapt::Error::Config(_) | hsadapt::Error::IncompatibleMode { .. } => 2,
                _ => 1,
            },
        }
    }
}

impl From<hsadapt::Error> for CliError {
    fn from(source: hsadapt::Error) -> Self {
        CliError::Stage { stage: "error".into(), source }
    }
}

/// Attaches a stage name to core errors.
pub trait StageExt<T> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> StageExt<T> for hsadapt::Result<T> {
    fn stage(self, stage: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Stage { stage: stage(), source })
    }
}
