use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("power-law fit failed: {0}")]
    FitFailure(String),

    /// `4 * xi2 * alpha >= 1`: the bound does not contract, too little data collected.
    #[error("contraction violated: 4*xi2*alpha = {factor} >= 1")]
    ContractionViolated { factor: f64 },

    #[error("inner solver failed: {0}")]
    InnerFailure(String),

    #[error("solver diverged at iteration {iteration}: ||p|| = {norm:e} exceeds {limit:e}")]
    Divergence {
        iteration: usize,
        norm: f64,
        limit: f64,
    },

    #[error("node {0} has an empty dataset")]
    EmptyDataset(usize),

    #[error("invalid aggregation weights: {0}")]
    Weights(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
