use thiserror::Error;

use crate::factor_graph::VariableId;

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("point coincides with the pose position; bearing is undefined")]
    CoincidentPoint,

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("variable {0} is missing from the values")]
    MissingVariable(VariableId),

    #[error("normal equations are singular: {0}")]
    SingularSystem(String),

    #[error("trajectory lengths differ: estimate has {estimate} poses, reference has {reference}")]
    LengthMismatch { estimate: usize, reference: usize },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<SlamError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SlamError {
    /// True for failures caused by the numerics rather than the input data.
    pub fn is_numerical(&self) -> bool {
        match self {
            SlamError::NotPositiveDefinite
            | SlamError::SingularSystem(_)
            | SlamError::CoincidentPoint => true,
            SlamError::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, SlamError>;
