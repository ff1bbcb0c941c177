use std::process::ExitCode;

use thiserror::Error;

/// Failures split by exit code: bad usage or configuration (2) versus
/// everything that goes wrong while running (1).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(scg_core::Error),
}

impl From<scg_core::Error> for CliError {
    fn from(e: scg_core::Error) -> Self {
        match e {
            scg_core::Error::Config(msg) => CliError::Usage(format!("config: {msg}")),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(scg_core::Error::Invalid(msg.into()))
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}
