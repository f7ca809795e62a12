use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid registry: {0}")]
    Registry(String),

    #[error("unknown subsystem `{0}`")]
    UnknownSystem(String),

    #[error("subsystem sets overlap on `{0}`")]
    OverlappingSystems(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("operator is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),

    #[error("invalid dephasing basis: {0}")]
    InvalidBasis(String),

    #[error("role assignment inconsistent: {0}")]
    Roles(String),

    #[error("operator not diagonal on `{system}` (off-diagonal mass {mass:.3e})")]
    NotDiagonal { system: String, mass: f64 },

    #[error("precondition violated: {what} (residual {residual:.3e})")]
    Precondition { what: String, residual: f64 },

    #[error("invalid decomposition: {0}")]
    Decomposition(String),

    #[error("constraint system: {0}")]
    System(String),

    #[error("pattern: {0}")]
    Pattern(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
