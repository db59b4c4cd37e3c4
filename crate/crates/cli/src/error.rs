use thiserror::Error;
use xens_core::XensError;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] XensError),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Synth(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Synth(_) => "synth",
        }
    }
}
