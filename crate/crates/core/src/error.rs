use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("not a probability vector: {0}")]
    NotStochastic(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("policy puts mass on output symbol {symbol} which has zero output probability")]
    SupportViolation { symbol: usize },

    #[error("belief grid would have {points} points, above the cap of {cap}")]
    GridTooLarge { points: u128, cap: usize },

    #[error("backward tables would need about {bytes} bytes, above the cap of {cap} bytes")]
    TablesTooLarge { bytes: u128, cap: u64 },

    #[error("tables do not match the requested problem: {0}")]
    ConfigMismatch(String),

    #[error(
        "stage {stage} branch {branch}: re-run rate {rerun} differs from stored table value {stored}"
    )]
    Consistency {
        stage: usize,
        branch: usize,
        rerun: f64,
        stored: f64,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
