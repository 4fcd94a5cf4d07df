use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("bad value at `{path}`: {message}")]
    TypeError { path: String, message: String },
    #[error("missing {kind} file: {}", path.display())]
    MissingFile { path: PathBuf, kind: &'static str },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Core {
        context: &'static str,
        #[source]
        source: dego::Error,
    },
}

impl CliError {
    /// 2 for configuration problems, 3 for data problems, 4 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownKey { .. } | CliError::TypeError { .. } | CliError::MissingFile { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core { source, .. } => match source {
                dego::Error::NonFinite(_) | dego::Error::NonFiniteGradient(_) | dego::Error::DegenerateQuaternion(_) => 4,
                dego::Error::Invalid(_)
                | dego::Error::NonDivisibleExtent { .. }
                | dego::Error::NonPositiveSize(_)
                | dego::Error::InvalidCamera(_)
                | dego::Error::IndexOutOfRange { .. } => 2,
                _ => 3,
            },
        }
    }
}

/// Attaches a command context to core errors.
pub trait Context<T> {
    fn context(self, context: &'static str) -> Result<T, CliError>;
}

impl<T> Context<T> for dego::Result<T> {
    fn context(self, context: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { context, source })
    }
}
