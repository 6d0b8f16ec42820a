use std::path::Path;

use emitterscope::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn input(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::Input {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    /// 2 config, 3 I/O or format, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Input { .. } => 3,
            Self::Core(e) => match e {
                Error::Contract(_) | Error::Range { .. } | Error::Shape { .. } => 2,
                Error::EmptyInput(_) => 3,
                Error::Io(_) | Error::Json(_) | Error::Format(_) => 3,
                _ => 4,
            },
        }
    }
}
