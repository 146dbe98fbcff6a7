use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("level {level} out of range (ladder has {len} entries)")]
    LevelOutOfRange { level: usize, len: usize },

    #[error("invalid ladder: {0}")]
    InvalidLadder(String),

    #[error("infeasible geometry at level {level}: {detail}")]
    InfeasibleGeometry { level: usize, detail: String },

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error("energy {energy} is within {dist:e} of the spectrum")]
    NearSingular { energy: f64, dist: f64 },

    #[error("domain is not non-resonant: well site at {site}")]
    NotNonResonant { site: String },

    #[error("eigenvalue {index} is degenerate (gap {gap:e})")]
    DegenerateEigenvalue { index: usize, gap: f64 },

    #[error("equation residual {residual:e} exceeds tolerance")]
    EquationResidualTooLarge { residual: f64 },

    #[error("initial data vanishes at the origin")]
    ZeroInitialData,

    #[error("no eigenvalue of the Schur complement within {window:e} of {energy}")]
    NoCandidate { energy: f64, window: f64 },

    #[error("fixed-point iteration did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("spectral window is empty")]
    EmptyWindow,

    #[error("{sites} random sites exceed the enumeration limit {limit}")]
    TooLarge { sites: usize, limit: usize },

    #[error("boundary weight {weight:e} exceeds {limit:e}")]
    BoundaryLeak { weight: f64, limit: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
