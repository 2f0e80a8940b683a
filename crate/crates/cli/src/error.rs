use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Command failure, split by the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags, or malformed inputs. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// I/O failures, divergence and other runtime faults. Exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<mbk_core::Error> for CliError {
    fn from(e: mbk_core::Error) -> Self {
        use mbk_core::Error as E;
        match e {
            E::Shape { .. } | E::Invalid(_) => CliError::Validation(e.to_string()),
            E::NonFinite(_) | E::MissingCache | E::Diverged { .. } => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}
