use thiserror::Error;

#[derive(Debug, Error)]
pub enum HomogError {
    #[error("geodesic integrator could not meet tolerance (step size underflow)")]
    StepSizeUnderflow,
    #[error("tangent vector length {length:.6} exceeds injectivity floor {floor:.6}")]
    RadiusExceeded { length: f64, floor: f64 },
    #[error("shooting iteration for log map did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDivergence { iterations: usize, residual: f64 },
    #[error("net separation {separation} must be below {limit}")]
    SeparationTooLarge { separation: f64, limit: f64 },
    #[error("exponents must satisfy 1/2 < beta < alpha < 1 (got alpha = {alpha}, beta = {beta})")]
    ExponentOrderViolated { alpha: f64, beta: f64 },
    #[error("partition denominator {value:.3e} fell below the configured floor")]
    PartitionGap { value: f64 },
    #[error("oscillation scale {eps} too large for transition width {width} (need eps <= width / 2)")]
    ScaleOrderViolated { eps: f64, width: f64 },
    #[error("P_k operator requires a nonzero mode")]
    ZeroMode,
    #[error("coefficient field is not uniformly elliptic: smallest eigenvalue {min_eig:.3e}")]
    NotElliptic { min_eig: f64 },
    #[error("iterative solver did not converge: {iterations} iterations, relative residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("element {element} has nonpositive metric determinant")]
    SingularAssembly { element: usize },
    #[error("mesh spacing {h} does not resolve oscillation scale {eps} (need h <= eps/8)")]
    UnderResolved { h: f64, eps: f64 },
    #[error("problem needs about {needed_mb} MB which exceeds the memory guard of {limit_mb} MB")]
    MemoryGuard { needed_mb: usize, limit_mb: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HomogError>;
