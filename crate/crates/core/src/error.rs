use thiserror::Error;

/// Errors raised across model construction, the nonlinear drivers and the
/// linear solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("lattice is disconnected: {components} connected components")]
    Disconnected { components: usize },

    #[error("no loaded degrees of freedom in the loaded box")]
    NoLoad,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("snapshot matrix is identically zero")]
    ZeroSnapshot,

    #[error("tangent matrix is singular (pivot {pivot:e} at row {row})")]
    SingularTangent { row: usize, pivot: f64 },

    #[error("reduced block K_rr is singular or not positive definite")]
    SingularKrr,

    #[error("coarse matrix C^T S C is singular")]
    SingularCoarse,

    #[error("conjugate gradient breakdown: non-positive curvature {curvature:e} at iteration {iteration}")]
    BreakdownNonSpd { iteration: usize, curvature: f64 },

    #[error("conjugate gradient stopped after {iterations} iterations at relative residual {residual:e}")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("preconditioner diagonal has a non-positive entry {value:e} at row {row}")]
    NonPositiveDiagonal { row: usize, value: f64 },

    #[error("Newton iterations did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("damage control failure: {0}")]
    ControlFailure(String),

    #[error("global correction is negligible: basis already captures the correction")]
    NegligibleCorrection,

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("mismatched geometry between runs: {0}")]
    MismatchedGeometry(String),

    #[error("matrix file format error: {0}")]
    Format(String),

    #[error("increment {index}: {source}")]
    AtIncrement { index: usize, source: Box<Error> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::Disconnected { .. } => "disconnected",
            Error::NoLoad => "no_load",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ZeroSnapshot => "zero_snapshot",
            Error::SingularTangent { .. } => "singular_tangent",
            Error::SingularKrr => "singular_krr",
            Error::SingularCoarse => "singular_coarse",
            Error::BreakdownNonSpd { .. } => "breakdown_non_spd",
            Error::CgNotConverged { .. } => "cg_not_converged",
            Error::NonPositiveDiagonal { .. } => "non_positive_diagonal",
            Error::NonConvergence { .. } => "non_convergence",
            Error::ControlFailure(_) => "control_failure",
            Error::NegligibleCorrection => "negligible_correction",
            Error::Scenario(_) => "scenario",
            Error::MismatchedGeometry(_) => "mismatched_geometry",
            Error::Format(_) => "format",
            Error::AtIncrement { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

impl Error {
    pub fn at_increment(self, index: usize) -> Self {
        match self {
            e @ Error::AtIncrement { .. } => e,
            e => Error::AtIncrement {
                index,
                source: Box::new(e),
            },
        }
    }

    /// Increment at which a solver error occurred, if known.
    pub fn increment(&self) -> Option<usize> {
        match self {
            Error::AtIncrement { index, .. } => Some(*index),
            _ => None,
        }
    }

    /// The error without its increment context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIncrement { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
