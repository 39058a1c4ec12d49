use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure in layer `{layer}`: {detail}")]
    NumericFailure { layer: String, detail: String },

    /// A budget (step count, latency or memory) cannot be met.
    #[error("budget infeasible on {resource}: {detail}")]
    BudgetInfeasible { resource: String, detail: String },

    #[error("missing artifact `{0}`")]
    MissingArtifact(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericFailure {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn infeasible(resource: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::BudgetInfeasible {
            resource: resource.into(),
            detail: detail.into(),
        }
    }

    pub fn is_budget_infeasible(&self) -> bool {
        matches!(self, Error::BudgetInfeasible { .. })
    }
}
