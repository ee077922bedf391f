use thiserror::Error;

/// Errors produced across the data, simulation, solver and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: need at least {needed} samples, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no interior equilibrium for v* = {0} m/s")]
    NoInteriorEquilibrium(f64),

    #[error("linearization failed: {0}")]
    Linearization(String),

    #[error("KKT factorization failed: {0}")]
    Factorization(String),

    #[error("quadratic program infeasible: {0}")]
    Infeasible(String),

    #[error("persistent excitation check failed after {attempts} attempts")]
    NotPersistentlyExciting { attempts: usize },

    #[error("collision between vehicle {ahead} and vehicle {behind} at t = {time:.2} s")]
    Collision { ahead: usize, behind: usize, time: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    ConfigSerialize(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
