use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph must have at least one node")]
    EmptyGraph,
    #[error("grid topology needs a perfect-square node count, got {0}")]
    NonSquareGrid(usize),
    #[error("graph is disconnected ({reached} of {n} nodes reachable from node 0)")]
    Disconnected { n: usize, reached: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("symmetric eigensolver did not converge to {tolerance:e}")]
    EigenNonConvergence { tolerance: f64 },
    #[error("iterates diverged at round {round} (node {node})")]
    Divergence { round: usize, node: usize },
    #[error("trace recorded with stride {stride}, query needs stride 1")]
    StrideMismatch { stride: usize },
    #[error("enumeration needs {size} sequences, cap is {cap}")]
    StateSpaceTooLarge { size: u128, cap: u128 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
