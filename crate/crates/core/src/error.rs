use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point budget exceeded: grid would hold {requested} points (budget {budget})")]
    PointBudget { requested: f64, budget: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("transport oracle too large: {size} points exceeds cap {cap}; subsample first")]
    OracleTooLarge { size: usize, cap: usize },

    #[error("transport simplex did not terminate within {0} pivots")]
    SimplexStalled(usize),

    #[error("truncation below m_index: m = {m}, m_index = {m_index}")]
    TruncationBelowIndex { m: usize, m_index: usize },

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("identity mismatch: {0}")]
    IdentityMismatch(String),

    #[error("inconsistent density: {0}")]
    InconsistentDensity(String),

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("support point lies outside B_{radius}: |x| = {norm}")]
    OutsideBall { radius: f64, norm: f64 },

    #[error("non-finite gradient at interior point {0}")]
    NonFiniteGradient(usize),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line());
        match line {
            Some(line) => Error::Csv(format!("line {line}: {err}")),
            None => Error::Csv(err.to_string()),
        }
    }
}
