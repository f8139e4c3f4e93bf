use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("overlap: {0}")]
    Overlap(String),
    #[error("domain: {0}")]
    Domain(String),
    #[error("support: {0}")]
    Support(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("eigensolver did not converge: {0}")]
    Convergence(String),
    #[error("singular step matrix: {0}")]
    SingularSystem(String),
    #[error("barrier verification failed: {0}")]
    Barrier(String),
    #[error("smallness violated: sup |u| = {sup:.3e} exceeds delta = {delta:.3e}")]
    Smallness { sup: f64, delta: f64 },
    #[error("fixed-point iteration diverging: update grew for {0} consecutive iterations")]
    Divergence(usize),
    #[error("missing linearized block {0:?}")]
    MissingBlock(Vec<usize>),
    #[error("stencil: {0}")]
    Stencil(String),
    #[error("ill-conditioned Gram matrix (condition estimate {0:.3e}); use a positive regularization weight")]
    IllConditioned(f64),
    #[error("rank-deficient forward map: numerical rank {rank} < {unknowns} unknowns")]
    RankDeficient { rank: usize, unknowns: usize },
    #[error("input rejected by oracle: exterior norm {norm:.3e} exceeds budget {budget:.3e}")]
    Budget { norm: f64, budget: f64 },
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

impl Error {
    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Overlap(_) => "OverlapError",
            Error::Domain(_) => "DomainError",
            Error::Support(_) => "SupportError",
            Error::Param(_) => "ParamError",
            Error::Shape { .. } => "ShapeError",
            Error::Convergence(_) => "ConvergenceError",
            Error::SingularSystem(_) => "SingularSystemError",
            Error::Barrier(_) => "BarrierError",
            Error::Smallness { .. } => "SmallnessError",
            Error::Divergence(_) => "DivergenceError",
            Error::MissingBlock(_) => "MissingBlockError",
            Error::Stencil(_) => "StencilError",
            Error::IllConditioned(_) => "IllConditionedError",
            Error::RankDeficient { .. } => "RankDeficientError",
            Error::Budget { .. } => "BudgetError",
            Error::Io(_) => "IoError",
            Error::Format(_) => "FormatError",
        }
    }

    /// Whether the failure came from leaving the small-data regime.
    pub fn is_smallness(&self) -> bool {
        matches!(self, Error::Smallness { .. } | Error::Budget { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
