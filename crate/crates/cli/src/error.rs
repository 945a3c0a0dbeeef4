use std::process::ExitCode;

use reid_core::ReidError;
use thiserror::Error;

/// Command failure, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config or an input that cannot be read.
    #[error("{0}")]
    Usage(String),

    /// Inputs were read but their contents are malformed or inconsistent.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
        }
    }
}

impl From<ReidError> for CliError {
    fn from(e: ReidError) -> Self {
        match e {
            ReidError::Format(_) | ReidError::Json(_) | ReidError::DegenerateEmbedding => Self::Data(e.to_string()),
            ReidError::Io(ref io) if io.kind() == std::io::ErrorKind::InvalidData => Self::Data(e.to_string()),
            ReidError::InvalidArgument(_) | ReidError::Config(_) | ReidError::Io(_) => Self::Usage(e.to_string()),
        }
    }
}

impl From<reid_service::ServiceError> for CliError {
    fn from(e: reid_service::ServiceError) -> Self {
        match e {
            reid_service::ServiceError::Journal(_) => Self::Data(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}
