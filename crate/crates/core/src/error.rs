use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} did not converge after {iterations} iterations (last iterate {last})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        last: f64,
    },

    #[error("operation not supported for this landscape: {0}")]
    UnsupportedLandscape(&'static str),

    /// A ReLU penalty was differentiated exactly at its kink; the caller must
    /// pick a subgradient in `[-l, 0]`.
    #[error("penalty is not differentiable at goal {goal}: delivered volume equals the goal")]
    Kink { goal: usize },

    #[error("arity mismatch: expected {expected} values, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("unknown placement `{0}`")]
    UnknownPlacement(String),

    #[error("allocation requires at least one campaign")]
    NoCampaigns,

    #[error("wrong optimizer mode: {0}")]
    WrongMode(&'static str),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch size {batch_size} exceeds dataset size {dataset_size}")]
    BatchTooLarge {
        batch_size: usize,
        dataset_size: usize,
    },

    #[error("strategy does not match campaign portfolio: {0}")]
    StrategyMismatch(String),

    #[error("invalid campaign: {0}")]
    InvalidCampaign(String),

    #[error("line {line}: {message}")]
    Record { line: u64, message: String },

    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to numerical failures or invalid configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownPlacement(_)
                | Error::StrategyMismatch(_)
                | Error::InvalidCampaign(_)
                | Error::Record { .. }
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io(_)
                | Error::EmptyDataset
                | Error::ArityMismatch { .. }
        )
    }

    pub fn is_non_convergence(&self) -> bool {
        matches!(self, Error::NonConvergence { .. })
    }
}
