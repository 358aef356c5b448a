use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),
    #[error("Riccati iteration did not converge after {iterations} iterations (last change {change:e})")]
    Divergence { iterations: usize, change: f64 },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("identifiability: data Gramian has rank {rank}, need {required}")]
    Identifiability { rank: usize, required: usize },
    #[error("insufficient excitation: regressor rank {rank} < {required}")]
    Excitation { rank: usize, required: usize },
    #[error("solver: {0}")]
    Solver(String),
    #[error("gradient probe for {entry} produced a non-finite loss")]
    GradientProbe { entry: String },
    #[error("perturbation population too wild: {rejected} of {drawn} draws rejected")]
    PopulationTooWild { rejected: usize, drawn: usize },
    #[error("resample budget exhausted after {drawn} draws ({rejected} rejected)")]
    ResampleBudget { rejected: usize, drawn: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
