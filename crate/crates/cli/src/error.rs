use std::path::Path;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, unreadable or malformed input files.
    #[error("{0}")]
    Input(String),
    /// Training or sampling produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// The command ran but some units of work failed or were left undone.
    #[error("{failed} of {total} {what} did not complete")]
    Partial { failed: usize, total: usize, what: &'static str },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Partial { .. } => 4,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }
}

impl From<dafkit::Error> for CliError {
    fn from(e: dafkit::Error) -> Self {
        match e {
            dafkit::Error::TrainingDivergence { .. } | dafkit::Error::SamplingDivergence { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
