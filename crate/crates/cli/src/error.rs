use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at {pointer:?}: {msg}")]
    Config { pointer: String, msg: String },
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("computation failed: {0}")]
    Compute(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config { .. } => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Input(_) => 4,
            CliError::Compute(_) => 5,
        }
    }
}

pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(anyhow::anyhow!("{}: {e}", path.display()))
}
