use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("verification failed: {0}")]
    ChecksFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Numerical(_) | Self::ChecksFailed(_) => 2,
            Self::Io(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }
}

impl From<gvpj::Error> for CliError {
    fn from(e: gvpj::Error) -> Self {
        use gvpj::Error as E;
        match e {
            E::Domain(_)
            | E::OffGrid { .. }
            | E::Ordering(_)
            | E::GridMismatch(_)
            | E::InsufficientObservations(_)
            | E::MissingDecomposition(_)
            | E::DimensionMismatch { .. } => Self::Validation(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
