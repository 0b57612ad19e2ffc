use thiserror::Error;

use crate::config::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("state norm² = {norm2} where a unit-norm state was required")]
    NonUnitNorm { norm2: f64 },

    #[error("wave vector {0:?} is not on the dual grid")]
    OffGrid(Vec<f64>),

    #[error("the k = 0 mode is excluded from kicks, jumps and kernels")]
    ZeroModeRequest,

    #[error("regularizer is negative (g = {value}) at |k| = {k}")]
    NegativeKernel { k: f64, value: f64 },

    #[error("divergent average momentum diffusion rate: {0}")]
    DivergentRate(String),

    #[error("unknown kernel preset `{0}`")]
    UnknownPreset(String),

    #[error("jump probability per step Λ·dt = {rate_dt:.3} exceeds 0.5")]
    RateOverflow { rate_dt: f64 },

    #[error("step guard violated: {0}")]
    StepGuard(String),

    #[error("non-finite amplitude encountered during {0}")]
    NonFinite(String),

    #[error("trajectory norm² = {norm2:.3e} exceeded the explosion threshold")]
    NormExplosion { norm2: f64 },

    #[error("basis of dimension {dim} exceeds the dense limit {limit}")]
    BasisTooLarge { dim: usize, limit: usize },

    #[error("trace drifted by {drift:.3e} during master-equation integration")]
    TraceDrift { drift: f64 },

    #[error("{aborted} of {total} trajectories aborted (limit is 1%)")]
    TooManyAborts { aborted: usize, total: usize },

    #[error("decompositions describe different initial states (distance {distance:.3e})")]
    MixtureMismatch { distance: f64 },

    #[error("configuration has {} violation(s):\n{}", .0.len(), format_violations(.0))]
    Config(Vec<Violation>),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}
