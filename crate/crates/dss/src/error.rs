use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = DssError> = std::result::Result<T, E>;

/// Everything the file layer and the harness can fail with.
#[derive(Debug, Error)]
pub enum DssError {
    #[error(transparent)]
    Core(#[from] dss_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<DssError> },
}

impl DssError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DssError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        DssError::Format { path: path.to_path_buf(), reason: reason.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DssError::Config(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            already @ DssError::Stage { .. } => already,
            other => DssError::Stage { stage, source: Box::new(other) },
        }
    }

    fn innermost(&self) -> &DssError {
        match self {
            DssError::Stage { source, .. } => source.innermost(),
            other => other,
        }
    }

    /// Process exit status: 2 config, 3 protocol, 4 any other stage failure.
    pub fn exit_code(&self) -> i32 {
        match self.innermost() {
            DssError::Config(_) => 2,
            DssError::Core(dss_core::Error::Protocol(_)) => 3,
            DssError::Core(dss_core::Error::Loop { source, .. })
                if matches!(**source, dss_core::Error::Protocol(_)) =>
            {
                3
            }
            _ => 4,
        }
    }
}

/// Attaches a stage name to any error.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<DssError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.into().in_stage(stage))
    }
}
