use std::path::PathBuf;

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Malformed input, configuration or arguments.
pub const EXIT_INPUT: i32 = 2;
/// Numerical failure during estimation or prediction.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Core(#[from] regcopula::Error),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use regcopula::Error as E;
        match self {
            CliError::Input(_) | CliError::Io { .. } => EXIT_INPUT,
            CliError::Core(E::Input(_) | E::Precondition(_)) => EXIT_INPUT,
            CliError::Core(E::Estimation(_) | E::Numerical(_) | E::Score(_) | E::Sampling(_)) => EXIT_NUMERICAL,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
