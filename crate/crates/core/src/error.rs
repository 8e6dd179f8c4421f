use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A scenario field violates the documented schema or a model invariant.
    #[error("invalid field `{field}`: {constraint}")]
    Schema { field: String, constraint: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("state space exceeds cap of {cap} states (reached {reached})")]
    ResourceLimit { cap: usize, reached: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index mismatch: {0}")]
    IndexMismatch(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last residual {last_residual:e})")]
    NonConvergence {
        iterations: usize,
        last_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("non-finite value produced by fixed-point map at iteration {0}")]
    NonFinite(usize),

    #[error("DC-OPF infeasible{}: {certificate}", .t.map(|t| format!(" at t={t}")).unwrap_or_default())]
    OpfInfeasible {
        t: Option<usize>,
        bus: Option<u32>,
        certificate: String,
    },

    #[error("DC-OPF solver failure{}: {detail}", .t.map(|t| format!(" at t={t}")).unwrap_or_default())]
    OpfNumerical { t: Option<usize>, detail: String },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn schema(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            constraint: constraint.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Residual history carried by a non-convergence error, looking through stage wrappers.
    pub fn residuals(&self) -> Option<&[f64]> {
        match self {
            Error::NonConvergence { residuals, .. } => Some(residuals),
            Error::Stage { source, .. } => source.residuals(),
            _ => None,
        }
    }
}
