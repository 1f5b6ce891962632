use thiserror::Error;

/// Errors raised by the identification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NebError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel factorization failed after jitter escalation (beta={beta}, lambda={lambda}, n={n})")]
    IllConditionedKernel { beta: f64, lambda: f64, n: usize },

    #[error("matrix is not numerically positive definite: {0}")]
    IllConditioned(String),

    #[error("sensitivity path from r{reference} to w{node} does not decay")]
    UnstableSensitivity { node: usize, reference: usize },

    #[error("network is not well posed: {0}")]
    IllPosedNetwork(String),

    #[error("unstable network: {0}")]
    UnstableNetwork(String),

    #[error("rank-deficient regressor: {0}")]
    RankDeficient(String),

    #[error("degenerate second moment (zero trace)")]
    DegenerateMoment,

    #[error("optimizer failed: {0}")]
    OptimizerFailure(String),

    #[error("FIT is undefined for an all-zero true impulse response")]
    UndefinedFit,

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<NebError>,
    },

    #[error("Gibbs chain position {position}: {source}")]
    AtChainPosition {
        position: usize,
        #[source]
        source: Box<NebError>,
    },
}

impl NebError {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        NebError::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_chain_position(self, position: usize) -> Self {
        NebError::AtChainPosition {
            position,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, NebError>;
