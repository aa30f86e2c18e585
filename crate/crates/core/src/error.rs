use thiserror::Error;

/// Errors raised across the depth diffusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid shape {height}x{width} with {len} values")]
    InvalidShape {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("mask has no valid pixel")]
    EmptyMask,
    #[error("value {0} is not finite on a valid pixel")]
    NonFinite(f64),
    #[error("degenerate depth range: d98 - d2 = {0:e}")]
    DegenerateRange(f64),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("invalid count: {0}")]
    InvalidCount(String),
    #[error("timesteps must be strictly decreasing: t = {t}, t_prev = {t_prev}")]
    NonMonotoneSteps { t: usize, t_prev: usize },
    #[error("not implemented: {0}")]
    NotImplemented(&'static str),
    #[error("ensemble alignment needs at least two members, got {0}")]
    NeedTwoMembers(usize),
    #[error("ensemble objective became non-finite")]
    NonFiniteObjective,
    #[error("least-squares fit is singular: prediction variance {0:e}")]
    SingularFit(f64),
    #[error("ground truth must be positive on valid pixels, found {0}")]
    NonPositiveGroundTruth(f64),
    #[error("depth must be positive on valid pixels, found {0}")]
    NonPositiveDepth(f64),
    #[error("training loss diverged at iteration {iteration}: {loss}")]
    DivergedLoss { iteration: usize, loss: f64 },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
