use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    /// A required upstream artifact is missing or unreadable.
    #[error("missing dependency {artifact}: {hint}")]
    Dependency { artifact: String, hint: String },
    #[error(transparent)]
    Core(sepsis_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Serve(String),
}

impl From<sepsis_core::Error> for CliError {
    fn from(e: sepsis_core::Error) -> Self {
        match e {
            sepsis_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Machine-readable form written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Dependency { .. } => "dependency",
            CliError::Core(_) => "runtime",
            CliError::Io(_) => "io",
            CliError::Serve(_) => "serve",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            _ => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { kind: self.kind(), message: self.to_string() }
    }
}
