//! Error type shared by every solver module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("grid dimensions must all be odd and >= 3, got {n:?}")]
    InvalidGridSize { n: [usize; 3] },

    #[error("cell edge lengths must be positive and finite, got {l:?}")]
    InvalidCellLength { l: [f64; 3] },

    #[error("field shape {got:?} does not match grid {expected:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error(
        "inverse transform output is not real (conjugate symmetry violated): \
         max |Im| = {im_max:.3e}, allowed {allowed:.3e}"
    )]
    ConjugateSymmetry { im_max: f64, allowed: f64 },

    #[error("invalid material parameters: {0}")]
    InvalidMaterial(String),

    #[error("non-positive Jacobian at voxel {voxel:?}: det F = {det:.6e}")]
    InvertedElement { voxel: [usize; 3], det: f64 },

    #[error("acoustic tensor not positive definite at frequency index {index}")]
    PreconditionerSingular { index: usize },

    #[error("macroscopic control block is singular (degenerate average stiffness)")]
    MacroBlockSingular,

    #[error("numerical breakdown in conjugate gradients at iteration {iteration}: {reason}")]
    NumericalBreakdown { iteration: usize, reason: String },

    #[error("load increment {increment} failed: {reason}")]
    IncrementFailed { increment: usize, reason: String },

    #[error("solve requires linear elastic materials, but phase {phase} is {kind}")]
    NonlinearMaterial { phase: usize, kind: &'static str },

    #[error("invalid load specification: {0}")]
    InvalidLoad(String),

    #[error("invalid microstructure parameters: {0}")]
    InvalidMicrostructure(String),

    #[error("sphere packing failed: {placed} of {requested} spheres placed within the attempt budget")]
    PackingJammed { placed: usize, requested: usize },

    #[error("malformed phase map file: {0}")]
    MalformedPhaseMap(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
