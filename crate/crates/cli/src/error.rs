use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs; exit code 2.
    #[error("{0}")]
    Usage(String),

    /// A prerequisite artifact has not been produced yet; exit code 2.
    #[error("missing {what} at {path}; run `{producer}` first")]
    MissingArtifact {
        what: &'static str,
        path: String,
        producer: &'static str,
    },

    /// Failure while running a command; exit code 1.
    #[error(transparent)]
    Runtime(#[from] lpbert_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::MissingArtifact { .. } => 2,
            CliError::Runtime(lpbert_core::Error::MissingFile { .. }) => 2,
            CliError::Runtime(lpbert_core::Error::Config(_)) => 2,
            CliError::Runtime(lpbert_core::Error::InvalidRatio(_)) => 2,
            CliError::Runtime(lpbert_core::Error::UnknownRelation(_)) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
