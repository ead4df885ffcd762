use thiserror::Error;

use crate::model::OffDiagonal;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("model is not diagonal in the pointer basis ({} off-diagonal entries)", .0.len())]
    Diagonality(Vec<OffDiagonal>),

    #[error("counting channel {channel} has zero intensity for conditioning pointer {gamma}")]
    DegenerateRate { gamma: usize, channel: usize },

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("step too large: intensity {intensity} on channel {channel} gives v*dt = {product} > {bound}")]
    StepTooLarge {
        channel: usize,
        intensity: f64,
        product: f64,
        bound: f64,
    },

    #[error("state left the density-matrix manifold: minimum eigenvalue {min_eigenvalue} at step {step}")]
    StateInvalid { step: usize, min_eigenvalue: f64 },

    #[error("conditioning on pointer {gamma} is undefined: {reason}")]
    DegenerateConditioning { gamma: usize, reason: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("filter intensity on channel {channel} vanished while processing a jump at step {step}")]
    DegenerateFilter { channel: usize, step: usize },

    #[error("fit window holds {points} grid points, need at least {required}")]
    InsufficientWindow { points: usize, required: usize },

    #[error("{unresolved} of {total} trajectories unresolved (limit 1%)")]
    TooManyUnresolved { unresolved: usize, total: usize },

    #[error("pointer {alpha} has no counting channel with zero intensity")]
    NoExtinctionChannels { alpha: usize },

    #[error("no trajectory collapsed to pointer {gamma} (q0 = {q0}, N = {total})")]
    EmptyCell { gamma: usize, q0: f64, total: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for the numerical guards of the integrators (step size, state repair, degenerate intensities).
    pub fn is_numerical_guard(&self) -> bool {
        matches!(
            self,
            Error::StepTooLarge { .. }
                | Error::StateInvalid { .. }
                | Error::DegenerateFilter { .. }
                | Error::DegenerateRate { .. }
                | Error::DegenerateConditioning { .. }
        )
    }
}
