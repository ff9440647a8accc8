use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("singular metric at ({x:.6}, {y:.6}): det g = {det:e}")]
    SingularMetric { x: f64, y: f64, det: f64 },

    #[error("point ({x:.6}, {y:.6}) lies outside the chart domain")]
    DomainError { x: f64, y: f64 },

    #[error("grid too coarse: {0} points per axis")]
    GridTooCoarse(usize),

    #[error("|grad f|_g = {0:.6} >= 1, outside the Darboux domain")]
    GradientTooLarge(f64),

    #[error("expression parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("expression evaluation failed: {0}")]
    Eval(String),

    #[error("degenerate case: K(x0) and grad K(x0) both vanish")]
    DegenerateCase,

    #[error("chart is not normalized: {0}")]
    NotNormalized(String),

    #[error("positivity conditions cannot be met: {0}")]
    PositivityFailure(String),

    #[error("epsilon {0} outside (0, 1)")]
    EpsOutOfRange(f64),

    #[error("case mismatch: expected {expected}, got {got}")]
    CaseMismatch { expected: String, got: String },

    #[error("no contraction: successive-difference ratio {ratio:.4} at iteration {iteration}")]
    NoContraction { iteration: usize, ratio: f64 },

    #[error("fixed-point iteration did not converge in {0} iterations")]
    MaxIterExceeded(usize),

    #[error("CFL condition violated: dt = {dt:e}, limit = {limit:e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("singular linear system (pivot {pivot} vanished)")]
    SingularLinearSystem { pivot: usize },

    #[error("linear solver failure: {0}")]
    SolverFailure(String),

    #[error("compatibility defect {defect:e} exceeds bound {bound:e}")]
    CompatibilityDefect { defect: f64, bound: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
