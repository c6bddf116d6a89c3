use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("grid needs at least one step")]
    ZeroSteps,
    #[error("invalid mark space: {0}")]
    InvalidMarks(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite state at node {node}, particle {particle}")]
    NonFiniteState { node: usize, particle: usize },
    #[error("G has rank {rank}, full rank {expected} required")]
    RankDeficientG { rank: usize, expected: usize },
    #[error("regression normal equations singular at node {node}")]
    SingularRegression { node: usize },
    #[error("Picard iteration not contracting at alpha0={alpha0}, delta={delta}: {reason}")]
    NonContracting { alpha0: f64, delta: f64, reason: String },
    #[error("Riccati coefficient vanishes at t={t}")]
    DegenerateRiccati { t: f64 },
    #[error("fixed point did not converge after {iterations} iterations (last change {last_change:e})")]
    FixedPointDiverged { iterations: usize, last_change: f64 },
    #[error("state equation not solved: {0}")]
    NotSolved(String),
    #[error("config: {0}")]
    ConfigParse(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("noise cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
