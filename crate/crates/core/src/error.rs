use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is off the manifold: residual {residual:e} exceeds {tolerance:e}")]
    InvalidPoint { residual: f64, tolerance: f64 },
    #[error("vector is not tangent at its base point: residual {0:e}")]
    NotTangent(f64),
    #[error("tangent vectors are attached to different base points")]
    BaseMismatch,
    #[error("vector is not normal to the manifold: tangential part {0:e}")]
    InvalidNormal(f64),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("retraction failed: {0}")]
    StepTooLarge(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical instability: {0}")]
    Instability(String),
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("{dropped} of {total} paths had a singular tangent Jacobian")]
    PathDegenerate { dropped: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid config file: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
