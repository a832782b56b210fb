use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty rating log")]
    EmptyLog,

    #[error("empty partition: {0}")]
    EmptyPartition(String),

    #[error("ground truth is incomplete: missing rating for cell {0}")]
    IncompleteGroundTruth(String),

    #[error("propensity outside its domain: {0}")]
    PropensityDomain(String),

    #[error("unknown {kind} id {id}")]
    UnknownEntity { kind: &'static str, id: String },

    #[error("training diverged at epoch {epoch}: {objective} objective became non-finite")]
    Diverged { epoch: usize, objective: &'static str },

    #[error("every grid configuration diverged")]
    ExhaustedGrid,

    #[error("instance too large for exact enumeration: {cells} cells (limit {limit})")]
    EnumerationBound { cells: usize, limit: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 config, 3 data, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Diverged { .. } | Error::ExhaustedGrid => 4,
            _ => 3,
        }
    }
}
