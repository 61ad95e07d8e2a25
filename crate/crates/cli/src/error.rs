use thiserror::Error;

use crate::ingest::IngestError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Model(#[from] crossre::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// 2 usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use crossre::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Ingest(_) | CliError::Io { .. } | CliError::Json { .. } => 3,
            CliError::Model(e) => match e {
                E::ResourceLimit(_) => 2,
                E::Config { .. } | E::Io(_) | E::InvalidLayout(_) | E::DimensionMismatch { .. } | E::NonFinite(_) => 3,
                _ => 4,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
