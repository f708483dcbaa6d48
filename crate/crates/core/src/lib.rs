//! Matrix-free spectral homogenization of periodic heterogeneous solids.
//!
//! The unknown is the periodic displacement fluctuation sampled on a voxel
//! grid (plus a small macroscopic block under stress or mixed control).
//! Differential operators are applied per frequency through forward/inverse
//! FFTs, the resulting symmetric positive definite system is solved with a
//! preconditioned conjugate gradient, and finite-strain problems wrap that
//! linear solve in an incremental Newton driver.

pub mod errors;
pub mod field;
pub mod grid;
pub mod load;
pub mod materials;
pub mod micro;
pub mod nonlinear;
pub mod operators;
pub mod residuals;
pub mod solver;
pub mod tensor;

pub use errors::{CoreError, Result};
pub use field::{
    RealField, RealSymField, RealTensorField, RealVectorField, SpectralField, SpectralSymField,
    SpectralTensorField, SpectralVectorField,
};
pub use grid::{Grid, GridShape, CONJUGATE_SYMMETRY_REL_TOL};
pub use tensor::{Mat3, Sym3, Tensor4, FULL_PAIRS, SYM_PAIRS, SYM_WEIGHTS};
