use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{0}")]
    NonConvergence(String),

    #[error("determinism failure: {0}")]
    Determinism(String),

    #[error(transparent)]
    Core(#[from] nrdf_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 0 success, 1 validation, 2 numerical failure, 3 i/o or checkpoint.
    pub fn exit_code(&self) -> i32 {
        use nrdf_core::Error as E;
        match self {
            CliError::Validation(_) => 1,
            CliError::NonConvergence(_) | CliError::Determinism(_) => 2,
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => 3,
            CliError::Core(e) => match e {
                E::Consistency { .. } => 2,
                E::VersionMismatch { .. } | E::CorruptCheckpoint(_) | E::Io(_) => 3,
                _ => 1,
            },
        }
    }
}
