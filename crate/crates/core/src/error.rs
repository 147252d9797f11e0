use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("layer grids differ")]
    GridMismatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("exact transport solve needs {support} support points, cap is {cap}")]
    SolverCapExceeded { support: usize, cap: usize },

    #[error("brute-force matching limited to {max} points, got {got}")]
    TooLarge { got: usize, max: usize },

    #[error("path has {0} layers, at least 2 are required")]
    TooFewLayers(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("forward state became non-finite at node {node} (sample {sample})")]
    NonFiniteState { node: usize, sample: usize },

    #[error("trace does not belong to this path/data pair: {0}")]
    TraceMismatch(String),

    #[error("growth certificate violated: observed ratio {observed} exceeds C = {certified}")]
    CertificateViolated { observed: f64, certified: f64 },

    #[error("backtracking exhausted after {0} halvings")]
    StepFailure(usize),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
