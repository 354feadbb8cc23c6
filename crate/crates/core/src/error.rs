use thiserror::Error;

/// Errors raised by the solvers, the simulator and the report writers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    SingularCovariance { condition: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("degenerate exponent constant nu = {nu:.3e}; g(t) is undefined")]
    DegenerateNu { nu: f64 },

    #[error("g(t) undefined: inner expression {inner:.6e} is not positive")]
    GDomain { inner: f64 },

    #[error("wealth must be positive, got {0}")]
    NonPositiveWealth(f64),

    #[error("price of asset {index} must be positive, got {value}")]
    NonPositivePrice { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no bracket with opposite blow-up classes found for lambda in [0, {search_max}]")]
    BracketFailure { search_max: f64 },

    #[error("asymptotic regime not reached at x_max = {x_max}: derivative ratio {ratio:.6} vs {target:.6}")]
    AsymptoteNotReached { x_max: f64, ratio: f64, target: f64 },

    #[error("diagonal entry {index} of (Sigma S)^T (Sigma S) is not positive ({value:.3e})")]
    NonPositiveDiagonal { index: usize, value: f64 },

    #[error("ODE integration failed: {0}")]
    Integration(String),

    #[error("quadrature failed to converge within its refinement budget on [{a}, {b}]")]
    QuadratureFailure { a: f64, b: f64 },

    #[error("empty grid")]
    EmptyGrid,

    #[error("invalid study: {0}")]
    InvalidStudy(String),

    #[error("malformed data: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
