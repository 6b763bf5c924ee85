use thiserror::Error;

use crate::elliptic::SolveStats;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid needs at least 3 nodes per side, got {0}")]
    GridTooSmall(usize),

    #[error("field has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("outside_domain: point ({0}, {1}) is not in the unit square")]
    OutsideDomain(f64, f64),

    #[error("projection_undefined: point is on the cut locus (norm {0:e})")]
    ProjectionUndefined(f64),

    #[error("off_manifold: base point is {0:e} away from the target")]
    OffManifold(f64),

    #[error("invalid warp function: {0}")]
    InvalidWarp(String),

    #[error(
        "elliptic_no_convergence: {} iterations, relative residual {:e}",
        .0.iterations,
        .0.residual
    )]
    EllipticNoConvergence(SolveStats),

    #[error("numeric_blowup: non-finite values produced at step {step}")]
    NumericBlowup { step: usize },

    #[error("descent_stalled: step underflow with gradient norm {grad_norm:e}")]
    DescentStalled { grad_norm: f64 },

    #[error("under_resolved: r_i = {r_i:e} is below 2h = {min:e}")]
    UnderResolved { r_i: f64, min: f64 },

    #[error("no_concentration: no ball reaches the selection level {level}")]
    NoConcentration { level: f64 },

    #[error("insufficient history: need at least {need} snapshots, got {got}")]
    InsufficientHistory { need: usize, got: usize },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::GridTooSmall(_) => "grid_too_small",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::OutsideDomain(..) => "outside_domain",
            Error::ProjectionUndefined(_) => "projection_undefined",
            Error::OffManifold(_) => "off_manifold",
            Error::InvalidWarp(_) => "invalid_warp",
            Error::EllipticNoConvergence(_) => "elliptic_no_convergence",
            Error::NumericBlowup { .. } => "numeric_blowup",
            Error::DescentStalled { .. } => "descent_stalled",
            Error::UnderResolved { .. } => "under_resolved",
            Error::NoConcentration { .. } => "no_concentration",
            Error::InsufficientHistory { .. } => "insufficient_history",
            Error::UnknownPreset(_) => "unknown_preset",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Parse(_) => "parse_error",
            Error::Io(_) => "io_error",
            Error::Json(_) => "json_error",
        }
    }
}
