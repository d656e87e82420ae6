use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,

    #[error("all surrogate values are identical; a basis needs a non-degenerate range")]
    DegenerateRange,

    #[error("covariance matrix is not positive definite after jitter up to {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("pooled design matrix is rank deficient")]
    RankDeficientDesign,

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("group {group}: {source}")]
    Group {
        group: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("objective was not finite at {0}")]
    NonFiniteEvaluation(String),

    #[error("{failed} of {total} bootstrap replicates failed")]
    TooManyFailedReplicates { failed: usize, total: usize },

    #[error("study '{study}' has a group with fewer than 2 observations")]
    SingletonGroup { study: String },

    #[error("conditional distribution is degenerate: {0}")]
    DegenerateConditional(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}, column {column}: {reason}")]
    Parse {
        line: u64,
        column: String,
        reason: String,
    },

    #[error("study '{0}' mixes rows with and without outcomes")]
    MixedNewStudy(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_group(self, group: u8) -> Error {
        Error::Group {
            group,
            source: Box::new(self),
        }
    }
}
