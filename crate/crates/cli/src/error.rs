use std::path::PathBuf;

use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Data(hpcnn_core::Error),

    #[error("run failed: {0}")]
    Run(hpcnn_core::Error),

    #[error("writing {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl CliError {
    /// 2 is also what the argument parser uses for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Run(_) => 4,
            CliError::Output { .. } => 5,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        CliError::Output { path: path.into(), source: Box::new(e) }
    }
}

impl From<hpcnn_core::Error> for CliError {
    fn from(e: hpcnn_core::Error) -> Self {
        match e {
            hpcnn_core::Error::Config(m) => CliError::Config(m),
            e => CliError::Run(e),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
