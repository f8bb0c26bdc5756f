use thiserror::Error;

use crate::equilibrium::IterationRecord;

/// Crate-wide error type. Variants group into configuration problems,
/// solver non-convergence, and structural/internal failures; the CLI maps
/// these groups onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid rejected: {0}")]
    Grid(String),

    #[error("point is off the unit sphere: |coords| = {norm}")]
    OffSphere { norm: f64 },

    #[error("cut locus breach: points are antipodal within tolerance (distance = {distance})")]
    CutLocus { distance: f64 },

    #[error("measure mass is {mass}, expected 1 within {tol}")]
    BadMass { mass: f64, tol: f64 },

    #[error("density must be strictly positive: node {node} has value {value}")]
    NonPositiveDensity { node: usize, value: f64 },

    #[error("invalid model parameter: {0}")]
    ModelParameter(String),

    #[error("invalid epsilon schedule: {0}")]
    Schedule(String),

    #[error("invalid continuation schedule: {0}")]
    Continuation(String),

    #[error(
        "sinkhorn stalled at eps = {eps}: marginal violation {violation:.3e} \
         after {iters} iterations"
    )]
    SinkhornStalled { eps: f64, violation: f64, iters: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("marginals are unbalanced: mass(mu) = {mu_mass}, mass(nu) = {nu_mass}")]
    Unbalanced { mu_mass: f64, nu_mass: f64 },

    #[error("LP oracle supports at most {cap} nodes per side, got {size}")]
    LpTooLarge { size: usize, cap: usize },

    #[error("LP oracle failed to terminate within {pivots} pivots")]
    LpStalled { pivots: usize },

    #[error("transport plan row {row} carries no mass; map extraction is undefined")]
    EmptyPlanRow { row: usize },

    #[error("normalization bracket search failed: no sign change within [-{bound}, {bound}]")]
    Bracket { bound: f64 },

    #[error(
        "fixed point iteration cap {cap} reached at t = {t} \
         (last step norm {last_step:.3e}); history attached"
    )]
    FixedPointCap { cap: usize, t: f64, last_step: f64, history: Vec<IterationRecord> },

    #[error("result is not converged: residual {residual:.3e} exceeds threshold {threshold:.3e}")]
    NotConverged { residual: f64, threshold: f64 },

    #[error("grid adjacency is disconnected: node {node} unreachable from node 0")]
    Disconnected { node: usize },

    #[error(
        "the MTW orthogonality constraint admits no nonzero pairs on S^1 \
         (1-dimensional tangent spaces); the check is vacuous there"
    )]
    MtwVacuousOnCircle,

    #[error("finite-difference step {value} outside supported range [{lo}, {hi}]")]
    FdStep { value: f64, lo: f64, hi: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 non-convergence, 4 internal.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Io(_) => 2,
            Error::SinkhornStalled { .. }
            | Error::FixedPointCap { .. }
            | Error::Bracket { .. }
            | Error::LpStalled { .. }
            | Error::NotConverged { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
