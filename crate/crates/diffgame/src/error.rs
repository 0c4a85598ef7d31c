use std::path::PathBuf;

use diffgame_core::dynamics::DynamicsError;
use diffgame_core::predictor::PredictError;
use diffgame_core::probes::ProbeError;
use diffgame_core::selection::SelectionError;

/// Errors surfaced by the file formats, the harness and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad input: a config field, an argument or a file's contents.
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Self::Validation { field: field.into(), message: message.to_string() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation { .. } | Self::Format { .. } => 1,
            Self::Io { .. } | Self::Runtime(_) => 2,
        }
    }
}

impl From<DynamicsError> for Error {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::NonFiniteState { .. } => Self::Runtime(e.to_string()),
            other => Self::validation("scenario", other),
        }
    }
}

impl From<PredictError> for Error {
    fn from(e: PredictError) -> Self {
        Self::validation("predict", e)
    }
}

impl From<ProbeError> for Error {
    fn from(e: ProbeError) -> Self {
        Self::validation("probes", e)
    }
}

impl From<SelectionError> for Error {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::AllCandidatesFailed => Self::Runtime(e.to_string()),
            other => Self::validation("selection", other),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
