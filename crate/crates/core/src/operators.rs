//! Differential operators applied per frequency, plus the voxelwise
//! stiffness contraction.
//!
//! Every operator multiplies spectral coefficients by factors built on the
//! fly from the grid's frequency vectors; nothing is materialized per mode.
//! With xi the frequency vector and a hat marking transformed fields:
//!
//! ```text
//!     sym_grad:  eps_ij = (i/2) (xi_j u_i + xi_i u_j)
//!     grad:      F_ij   = i xi_j u_i
//!     div:       d_i    = i s_ij xi_j
//!     curl:      c_ij   = i e_jkl xi_k A_il        (second-index, row-wise)
//! ```
//!
//! All four vanish identically at the zero frequency. The compatibility
//! check uses `curl_curl`, one curl per index (a transpose between two
//! second-index curls); applying the same-index curl twice would not
//! annihilate compatible fields.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::errors::{CoreError, Result};
use crate::field::{
    RealSymField, RealTensorField, SpectralField, SpectralSymField, SpectralTensorField,
    SpectralVectorField,
};
use crate::grid::Grid;
use crate::tensor::{Tensor4, FULL_PAIRS, SYM_PAIRS};

/// Levi-Civita symbol.
const LEVI: [[[f64; 3]; 3]; 3] = {
    let mut e = [[[0.0; 3]; 3]; 3];
    e[0][1][2] = 1.0;
    e[1][2][0] = 1.0;
    e[2][0][1] = 1.0;
    e[0][2][1] = -1.0;
    e[2][1][0] = -1.0;
    e[1][0][2] = -1.0;
    e
};

#[inline]
fn i_mul(z: Complex64) -> Complex64 {
    Complex64::new(-z.im, z.re)
}

fn check<const C: usize>(grid: &Grid, f: &SpectralField<C>) -> Result<()> {
    if f.shape() != grid.shape() {
        return Err(CoreError::ShapeMismatch {
            expected: grid.n(),
            got: f.shape().n,
        });
    }
    Ok(())
}

/// Symmetric gradient of a spectral displacement field.
pub fn sym_grad(grid: &Grid, u: &SpectralVectorField) -> Result<SpectralSymField> {
    check(grid, u)?;
    let mut out = SpectralSymField::zeros(u.shape());
    out.data_mut()
        .par_chunks_mut(6)
        .enumerate()
        .for_each(|(v, chunk)| {
            let xi = grid.xi(v);
            let uv = u.voxel(v);
            for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
                chunk[a] = i_mul(uv[i] * xi[j] + uv[j] * xi[i]) * 0.5;
            }
        });
    Ok(out)
}

/// Full gradient of a spectral displacement field.
pub fn grad(grid: &Grid, u: &SpectralVectorField) -> Result<SpectralTensorField> {
    check(grid, u)?;
    let mut out = SpectralTensorField::zeros(u.shape());
    out.data_mut()
        .par_chunks_mut(9)
        .enumerate()
        .for_each(|(v, chunk)| {
            let xi = grid.xi(v);
            let uv = u.voxel(v);
            for (a, &(i, j)) in FULL_PAIRS.iter().enumerate() {
                chunk[a] = i_mul(uv[i] * xi[j]);
            }
        });
    Ok(out)
}

/// Divergence of a symmetric spectral tensor field.
pub fn div_sym(grid: &Grid, s: &SpectralSymField) -> Result<SpectralVectorField> {
    check(grid, s)?;
    let mut out = SpectralVectorField::zeros(s.shape());
    out.data_mut()
        .par_chunks_mut(3)
        .enumerate()
        .for_each(|(v, chunk)| {
            let xi = grid.xi(v);
            let sv = s.voxel(v);
            // Expand the six stored components to the full rows.
            let full = sym_voxel_to_full(&sv);
            for i in 0..3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..3 {
                    acc += full[i][j] * xi[j];
                }
                chunk[i] = i_mul(acc);
            }
        });
    Ok(out)
}

/// Divergence of a general spectral tensor field (contraction on the second
/// index, row-wise).
pub fn div_tensor(grid: &Grid, s: &SpectralTensorField) -> Result<SpectralVectorField> {
    check(grid, s)?;
    let mut out = SpectralVectorField::zeros(s.shape());
    out.data_mut()
        .par_chunks_mut(3)
        .enumerate()
        .for_each(|(v, chunk)| {
            let xi = grid.xi(v);
            let sv = s.voxel(v);
            for i in 0..3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..3 {
                    acc += sv[3 * i + j] * xi[j];
                }
                chunk[i] = i_mul(acc);
            }
        });
    Ok(out)
}

/// Curl of a general spectral tensor field on its second index.
pub fn curl(grid: &Grid, a: &SpectralTensorField) -> Result<SpectralTensorField> {
    check(grid, a)?;
    let mut out = SpectralTensorField::zeros(a.shape());
    out.data_mut()
        .par_chunks_mut(9)
        .enumerate()
        .for_each(|(v, chunk)| {
            let xi = grid.xi(v);
            let av = a.voxel(v);
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for k in 0..3 {
                        for l in 0..3 {
                            let e = LEVI[j][k][l];
                            if e != 0.0 {
                                acc += av[3 * i + l] * (e * xi[k]);
                            }
                        }
                    }
                    chunk[3 * i + j] = i_mul(acc);
                }
            }
        });
    Ok(out)
}

/// Incompatibility operator: curl applied once per index, realized as
/// curl(transpose(curl(eps))). Symmetric gradients are annihilated exactly.
pub fn curl_curl(grid: &Grid, eps: &SpectralSymField) -> Result<SpectralTensorField> {
    check(grid, eps)?;
    let full = sym_to_full(eps);
    let first = curl(grid, &full)?;
    let transposed = transpose_field(&first);
    curl(grid, &transposed)
}

/// Expand symmetric six-component storage to the full nine components.
pub fn sym_to_full(s: &SpectralSymField) -> SpectralTensorField {
    let mut out = SpectralTensorField::zeros(s.shape());
    out.data_mut()
        .par_chunks_mut(9)
        .enumerate()
        .for_each(|(v, chunk)| {
            let full = sym_voxel_to_full(&s.voxel(v));
            for (a, &(i, j)) in FULL_PAIRS.iter().enumerate() {
                chunk[a] = full[i][j];
            }
        });
    out
}

fn transpose_field(a: &SpectralTensorField) -> SpectralTensorField {
    let mut out = SpectralTensorField::zeros(a.shape());
    out.data_mut()
        .par_chunks_mut(9)
        .enumerate()
        .for_each(|(v, chunk)| {
            let av = a.voxel(v);
            for i in 0..3 {
                for j in 0..3 {
                    chunk[3 * i + j] = av[3 * j + i];
                }
            }
        });
    out
}

#[inline]
fn sym_voxel_to_full(s: &[Complex64; 6]) -> [[Complex64; 3]; 3] {
    let mut m = [[Complex64::new(0.0, 0.0); 3]; 3];
    for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
        m[i][j] = s[a];
        m[j][i] = s[a];
    }
    m
}

/// Heterogeneous stiffness, either a per-phase table indexed by a phase map
/// or a per-voxel tangent array.
#[derive(Clone, Copy)]
pub enum StiffnessField<'a> {
    PerPhase {
        table: &'a [Tensor4],
        phase: &'a [u16],
    },
    PerVoxel(&'a [Tensor4]),
}

impl<'a> StiffnessField<'a> {
    #[inline]
    pub fn at(&self, v: usize) -> &'a Tensor4 {
        match self {
            StiffnessField::PerPhase { table, phase } => &table[phase[v] as usize],
            StiffnessField::PerVoxel(t) => &t[v],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StiffnessField::PerPhase { phase, .. } => phase.len(),
            StiffnessField::PerVoxel(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Voxelwise sigma = C(x) : eps for symmetric strain fields.
pub fn contract_stiffness(c: &StiffnessField, eps: &RealSymField) -> RealSymField {
    let mut out = RealSymField::zeros(eps.shape());
    let cc = *c;
    out.data_mut()
        .par_chunks_mut(6)
        .enumerate()
        .for_each(|(v, chunk)| {
            let s = cc.at(v).contract_sym(&eps.sym_at(v));
            chunk.copy_from_slice(&s.0);
        });
    out
}

/// Voxelwise P = K(x) : G for general second-order fields.
pub fn contract_stiffness_full(c: &StiffnessField, g: &RealTensorField) -> RealTensorField {
    let mut out = RealTensorField::zeros(g.shape());
    let cc = *c;
    out.data_mut()
        .par_chunks_mut(9)
        .enumerate()
        .for_each(|(v, chunk)| {
            let p = cc.at(v).contract_mat(&g.mat_at(v));
            for (a, &(i, j)) in FULL_PAIRS.iter().enumerate() {
                chunk[a] = p.0[i][j];
            }
        });
    out
}
