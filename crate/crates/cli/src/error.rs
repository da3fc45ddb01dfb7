use std::path::{Path, PathBuf};

use keyvote::eval::experiment::{ConfigError, ExperimentError};
use keyvote::eval::scene::SceneError;
use keyvote::field::FieldError;
use keyvote::geometry::GeometryError;
use keyvote::model::ModelError;
use keyvote::pnp::PnpError;
use keyvote::voting::VotingError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or inputs that fail validation before any work starts.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Field(FieldError),
    #[error(transparent)]
    Voting(#[from] VotingError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Experiment(ExperimentError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, message: impl ToString) -> CliError {
        CliError::Input {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => c.into(),
            ExperimentError::Model {
                path,
                source: source @ (ModelError::KTooLarge { .. } | ModelError::KZero),
            } => CliError::Usage(format!("{path}: {source}")),
            other => CliError::Experiment(other),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::DimensionMismatch(_) | FieldError::InvalidNoise(_) => CliError::Usage(e.to_string()),
            other => CliError::Field(other),
        }
    }
}

/// Model errors from selection parameters are usage errors; loading failures are not.
pub fn model_error(path: &Path, e: ModelError) -> CliError {
    match e {
        ModelError::KTooLarge { .. } | ModelError::KZero | ModelError::InvalidKeypoints(_) => {
            CliError::Usage(format!("{}: {e}", path.display()))
        }
        ModelError::Io { source, .. } => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => CliError::input(path, other),
    }
}
