//! Constitutive models and per-voxel material state.
//!
//! Three models cover the solver's needs:
//!
//! * linear elasticity (any minor/major-symmetric stiffness as data),
//! * Saint Venant-Kirchhoff hyperelasticity with its exact tangent,
//! * rate-independent J2 plasticity with linear isotropic hardening,
//!   integrated by radial return with the consistent algorithmic tangent.
//!
//! All models expose one finite-strain entry point taking the deformation
//! gradient. The J2 model is a small-strain law and interprets F through
//! eps = sym(F - I); at the strain levels it is meant for (fractions of a
//! percent) this is exact to solver tolerances and lets one incremental
//! driver serve every material.
//!
//! State handling: plastic state lives in a [`StateField`] with a committed
//! and a trial copy per voxel. Constitutive sweeps read committed and write
//! trial; the driver calls [`StateField::commit`] when an increment is
//! accepted, which is the only way trial values become permanent.

use rayon::prelude::*;

use crate::errors::{CoreError, Result};
use crate::field::{RealField, RealTensorField};
use crate::grid::GridShape;
use crate::tensor::{Mat3, Sym3, Tensor4};

/// Isotropic Hooke stiffness from Young's modulus and Poisson ratio:
/// C_ijkl = lambda d_ij d_kl + mu (d_ik d_jl + d_il d_jk).
pub fn isotropic_stiffness(e: f64, nu: f64) -> Result<Tensor4> {
    let (lambda, mu) = lame_constants(e, nu)?;
    Ok(stiffness_from_lame(lambda, mu))
}

/// lambda = E nu / ((1+nu)(1-2nu)), mu = E / (2(1+nu)).
pub fn lame_constants(e: f64, nu: f64) -> Result<(f64, f64)> {
    if !(e.is_finite() && e > 0.0) {
        return Err(CoreError::InvalidMaterial(format!(
            "Young's modulus must be positive, got {e}"
        )));
    }
    if !(nu.is_finite() && nu > -1.0 && nu < 0.5) {
        return Err(CoreError::InvalidMaterial(format!(
            "Poisson ratio must lie in (-1, 0.5), got {nu}"
        )));
    }
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

fn stiffness_from_lame(lambda: f64, mu: f64) -> Tensor4 {
    let mut c = Tensor4::zero();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
                    c.set(
                        i,
                        j,
                        k,
                        l,
                        lambda * d(i, j) * d(k, l) + mu * (d(i, k) * d(j, l) + d(i, l) * d(j, k)),
                    );
                }
            }
        }
    }
    c
}

/// a_ij b_kl for symmetric factors.
fn dyad_sym(a: &Sym3, b: &Sym3) -> Tensor4 {
    let am = a.to_mat3();
    let bm = b.to_mat3();
    let mut t = Tensor4::zero();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    t.set(i, j, k, l, am.0[i][j] * bm.0[k][l]);
                }
            }
        }
    }
    t
}

/// Symmetric identity projector I_ijkl = (d_ik d_jl + d_il d_jk) / 2.
fn identity_sym() -> Tensor4 {
    let mut t = Tensor4::zero();
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    t.set(i, j, k, l, 0.5 * (d(i, k) * d(j, l) + d(i, l) * d(j, k)));
                }
            }
        }
    }
    t
}

/// Deviatoric projector I_sym - (1/3) I x I.
fn deviatoric_projector() -> Tensor4 {
    let mut t = identity_sym();
    let id = Sym3([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    t.add_scaled(&dyad_sym(&id, &id), -1.0 / 3.0);
    t
}

/// Parameters of the J2 model with linear isotropic hardening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct J2Params {
    pub e: f64,
    pub nu: f64,
    pub yield_stress: f64,
    pub hardening: f64,
}

impl J2Params {
    /// E = 70, nu = 0.3, yield stress 0.1, hardening E/20.
    pub fn default_set() -> J2Params {
        J2Params {
            e: 70.0,
            nu: 0.3,
            yield_stress: 0.1,
            hardening: 70.0 / 20.0,
        }
    }
}

/// One constitutive model, shared by every voxel of a phase.
#[derive(Debug, Clone)]
pub enum MaterialModel {
    LinearElastic {
        stiffness: Tensor4,
    },
    SaintVenantKirchhoff {
        stiffness: Tensor4,
    },
    J2Plasticity {
        stiffness: Tensor4,
        lambda: f64,
        mu: f64,
        params: J2Params,
    },
}

/// Number of state scalars per voxel for the J2 model: six plastic strain
/// components plus the accumulated plastic multiplier.
pub const J2_STATE_SIZE: usize = 7;

impl MaterialModel {
    pub fn linear_elastic(e: f64, nu: f64) -> Result<MaterialModel> {
        Ok(MaterialModel::LinearElastic {
            stiffness: isotropic_stiffness(e, nu)?,
        })
    }

    /// Linear elasticity with an arbitrary (minor/major symmetric) stiffness.
    pub fn linear_elastic_from(stiffness: Tensor4) -> MaterialModel {
        MaterialModel::LinearElastic { stiffness }
    }

    pub fn saint_venant_kirchhoff(e: f64, nu: f64) -> Result<MaterialModel> {
        Ok(MaterialModel::SaintVenantKirchhoff {
            stiffness: isotropic_stiffness(e, nu)?,
        })
    }

    pub fn j2_plasticity(params: J2Params) -> Result<MaterialModel> {
        if !(params.yield_stress.is_finite() && params.yield_stress > 0.0) {
            return Err(CoreError::InvalidMaterial(format!(
                "yield stress must be positive, got {}",
                params.yield_stress
            )));
        }
        if !(params.hardening.is_finite() && params.hardening >= 0.0) {
            return Err(CoreError::InvalidMaterial(format!(
                "hardening modulus must be non-negative, got {}",
                params.hardening
            )));
        }
        let (lambda, mu) = lame_constants(params.e, params.nu)?;
        Ok(MaterialModel::J2Plasticity {
            stiffness: stiffness_from_lame(lambda, mu),
            lambda,
            mu,
            params,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MaterialModel::LinearElastic { .. } => "linear_elastic",
            MaterialModel::SaintVenantKirchhoff { .. } => "saint_venant_kirchhoff",
            MaterialModel::J2Plasticity { .. } => "j2_plasticity",
        }
    }

    /// Small-strain stiffness, available only for linear elasticity.
    pub fn linear_stiffness(&self) -> Option<&Tensor4> {
        match self {
            MaterialModel::LinearElastic { stiffness } => Some(stiffness),
            _ => None,
        }
    }

    /// State scalars this model carries per voxel.
    pub fn state_size(&self) -> usize {
        match self {
            MaterialModel::J2Plasticity { .. } => J2_STATE_SIZE,
            _ => 0,
        }
    }

    /// Evaluate stress and tangent at a deformation gradient.
    ///
    /// Returns the first Piola-Kirchhoff stress and the nominal tangent
    /// dP/dF. For the small-strain models (linear elastic, J2) the Cauchy
    /// stress of eps = sym(F - I) plays the role of P and the tangent has
    /// the usual minor symmetries.
    pub fn evaluate(
        &self,
        f: &Mat3,
        committed: &[f64],
        trial: &mut [f64],
    ) -> std::result::Result<(Mat3, Tensor4), NonPositiveJacobian> {
        match self {
            MaterialModel::LinearElastic { stiffness } => {
                let eps = (*f - Mat3::identity()).sym();
                let sigma = stiffness.contract_sym(&eps);
                Ok((sigma.to_mat3(), stiffness.clone()))
            }
            MaterialModel::SaintVenantKirchhoff { stiffness } => svk_stress_tangent(stiffness, f),
            MaterialModel::J2Plasticity {
                stiffness,
                lambda,
                mu,
                params,
            } => {
                let eps = (*f - Mat3::identity()).sym();
                let (sigma, tangent) =
                    j2_update(stiffness, *lambda, *mu, params, &eps, committed, trial);
                Ok((sigma.to_mat3(), tangent))
            }
        }
    }
}

/// Raised by a constitutive evaluation when det F <= 0; the sweep attaches
/// the offending voxel.
#[derive(Debug, Clone, Copy)]
pub struct NonPositiveJacobian {
    pub det: f64,
}

/// Saint Venant-Kirchhoff stress and exact tangent:
/// E = (F^T F - I)/2, S = C : E, P = F S,
/// dP_ij/dF_kl = d_ik S_jl + F_im C_mjnl F_kn.
pub fn svk_stress_tangent(
    c: &Tensor4,
    f: &Mat3,
) -> std::result::Result<(Mat3, Tensor4), NonPositiveJacobian> {
    let det = f.det();
    if det <= 0.0 {
        return Err(NonPositiveJacobian { det });
    }
    let ft_f = f.transpose().matmul(f);
    let e_gl = Sym3([
        0.5 * (ft_f.0[0][0] - 1.0),
        0.5 * (ft_f.0[1][1] - 1.0),
        0.5 * (ft_f.0[2][2] - 1.0),
        0.5 * ft_f.0[1][2],
        0.5 * ft_f.0[0][2],
        0.5 * ft_f.0[0][1],
    ]);
    let s = c.contract_sym(&e_gl).to_mat3();
    let p = f.matmul(&s);

    let mut k = Tensor4::zero();
    for i in 0..3 {
        for j in 0..3 {
            for kk in 0..3 {
                for l in 0..3 {
                    let geom = if i == kk { s.0[j][l] } else { 0.0 };
                    let mut mat = 0.0;
                    for m in 0..3 {
                        for n in 0..3 {
                            mat += f.0[i][m] * c.get(m, j, n, l) * f.0[kk][n];
                        }
                    }
                    k.set(i, j, kk, l, geom + mat);
                }
            }
        }
    }
    Ok((p, k))
}

/// Radial-return update for J2 plasticity with linear isotropic hardening.
///
/// The committed state is `[eps_p (6 components), pbar]`; the trial slice
/// receives the updated state. Returns the stress and the consistent
/// algorithmic tangent (equal to the elastic stiffness on elastic steps).
pub fn j2_update(
    c_el: &Tensor4,
    lambda: f64,
    mu: f64,
    params: &J2Params,
    eps: &Sym3,
    committed: &[f64],
    trial: &mut [f64],
) -> (Sym3, Tensor4) {
    let eps_p = Sym3([
        committed[0],
        committed[1],
        committed[2],
        committed[3],
        committed[4],
        committed[5],
    ]);
    let pbar = committed[6];

    let eps_e = *eps - eps_p;
    let tr = eps_e.trace();
    let mut sigma_tr = eps_e.scale(2.0 * mu);
    for d in 0..3 {
        sigma_tr.0[d] += lambda * tr;
    }

    let mean = sigma_tr.trace() / 3.0;
    let mut s_tr = sigma_tr;
    for d in 0..3 {
        s_tr.0[d] -= mean;
    }
    let s_norm = s_tr.frobenius();
    let q_tr = (1.5_f64).sqrt() * s_norm;
    let yield_now = params.yield_stress + params.hardening * pbar;

    // A state committed exactly on the yield surface re-enters with
    // q_tr == yield_now up to round-off; the consistent tangent is
    // discontinuous across the branch point, so a strict comparison would
    // make the branch (and the tangent handed to the outer iteration) a
    // coin flip on neutral or unloading sweeps. The relative margin keeps
    // those on the elastic branch at a stress error of the same order.
    if q_tr <= yield_now * (1.0 + 1e-10) || s_norm == 0.0 {
        trial[..7].copy_from_slice(&committed[..7]);
        return (sigma_tr, c_el.clone());
    }

    let h = params.hardening;
    let dgamma = (q_tr - yield_now) / (3.0 * mu + h);
    let n_hat = s_tr.scale(1.0 / s_norm);
    let flow = n_hat.scale((1.5_f64).sqrt()); // N = sqrt(3/2) s/|s|

    let sigma = sigma_tr - flow.scale(2.0 * mu * dgamma);
    let eps_p_new = eps_p + flow.scale(dgamma);
    let pbar_new = pbar + dgamma;
    trial[..6].copy_from_slice(&eps_p_new.0);
    trial[6] = pbar_new;

    // Consistent tangent:
    // C - (4 mu^2 / (3 mu + H)) N x N
    //   - (4 mu^2 dgamma sqrt(3/2) / |s_tr|) (I_dev - n x n).
    let mut tangent = c_el.clone();
    tangent.add_scaled(&dyad_sym(&flow, &flow), -4.0 * mu * mu / (3.0 * mu + h));
    let mut dir = deviatoric_projector();
    dir.add_scaled(&dyad_sym(&n_hat, &n_hat), -1.0);
    tangent.add_scaled(
        &dir,
        -4.0 * mu * mu * dgamma * (1.5_f64).sqrt() / s_norm,
    );

    (sigma, tangent)
}

/// Committed/trial per-voxel state storage for path-dependent models.
#[derive(Debug, Clone)]
pub struct StateField {
    stride: usize,
    committed: Vec<f64>,
    trial: Vec<f64>,
}

impl StateField {
    /// Stride is the largest state size over the material set (at least 1 so
    /// slicing stays uniform; stateless models ignore their slices).
    pub fn new(nvox: usize, materials: &[MaterialModel]) -> StateField {
        let stride = materials
            .iter()
            .map(|m| m.state_size())
            .max()
            .unwrap_or(0)
            .max(1);
        StateField {
            stride,
            committed: vec![0.0; nvox * stride],
            trial: vec![0.0; nvox * stride],
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn committed(&self) -> &[f64] {
        &self.committed
    }

    pub fn trial(&self) -> &[f64] {
        &self.trial
    }

    /// Accept the trial state: it becomes the committed state.
    pub fn commit(&mut self) {
        self.committed.copy_from_slice(&self.trial);
    }

    /// Drop the trial state (rollback to committed).
    pub fn reset_trial(&mut self) {
        self.trial.copy_from_slice(&self.committed);
    }

    pub fn split_for_sweep(&mut self) -> (&[f64], &mut [f64], usize) {
        (&self.committed, &mut self.trial, self.stride)
    }
}

/// Evaluate every voxel: P(x) and tangent K(x) from the deformation gradient
/// field, reading committed state and writing trial state.
pub fn evaluate_all(
    materials: &[MaterialModel],
    phase: &[u16],
    f_field: &RealTensorField,
    state: &mut StateField,
    p_out: &mut RealTensorField,
    tangents: &mut Vec<Tensor4>,
) -> Result<()> {
    let shape = f_field.shape();
    let nvox = shape.nvox();
    assert_eq!(phase.len(), nvox);
    tangents.resize(nvox, Tensor4::zero());
    let (committed, trial, stride) = state.split_for_sweep();

    let f_ref = &*f_field;
    p_out
        .data_mut()
        .par_chunks_mut(9)
        .zip(tangents.par_iter_mut())
        .zip(trial.par_chunks_mut(stride))
        .enumerate()
        .try_for_each(|(v, ((p_chunk, k_out), trial_v))| {
            let mat = &materials[phase[v] as usize];
            let f = f_ref.mat_at(v);
            let committed_v = &committed[v * stride..(v + 1) * stride];
            match mat.evaluate(&f, committed_v, trial_v) {
                Ok((p, k)) => {
                    for (a, &(i, j)) in crate::tensor::FULL_PAIRS.iter().enumerate() {
                        p_chunk[a] = p.0[i][j];
                    }
                    *k_out = k;
                    Ok(())
                }
                Err(NonPositiveJacobian { det }) => Err(CoreError::InvertedElement {
                    voxel: shape.coords(v),
                    det,
                }),
            }
        })
}

/// Volume average of a per-voxel tangent field. Serial summation keeps the
/// result independent of thread count.
pub fn average_tangent(tangents: &[Tensor4]) -> Tensor4 {
    let mut avg = Tensor4::zero();
    for t in tangents {
        avg.add_scaled(t, 1.0);
    }
    avg.scale(1.0 / tangents.len().max(1) as f64);
    avg
}

/// Volume average of a per-phase stiffness table over a phase map.
pub fn average_stiffness(table: &[Tensor4], phase: &[u16]) -> Tensor4 {
    let mut counts = vec![0_usize; table.len()];
    for &p in phase {
        counts[p as usize] += 1;
    }
    let mut avg = Tensor4::zero();
    for (c, t) in counts.iter().zip(table.iter()) {
        avg.add_scaled(t, *c as f64);
    }
    avg.scale(1.0 / phase.len().max(1) as f64);
    avg
}

/// Build the per-phase small-strain stiffness table for a linear solve;
/// fails on the first non-linear phase.
pub fn linear_stiffness_table(materials: &[MaterialModel]) -> Result<Vec<Tensor4>> {
    materials
        .iter()
        .enumerate()
        .map(|(p, m)| {
            m.linear_stiffness()
                .cloned()
                .ok_or(CoreError::NonlinearMaterial {
                    phase: p,
                    kind: m.kind(),
                })
        })
        .collect()
}

/// Uniform deformation-gradient field helper used by drivers and tests.
pub fn uniform_gradient_field(shape: GridShape, f: Mat3) -> RealTensorField {
    let mut out = RealField::<9>::zeros(shape);
    out.fill([
        f.0[0][0], f.0[0][1], f.0[0][2], f.0[1][0], f.0[1][1], f.0[1][2], f.0[2][0], f.0[2][1],
        f.0[2][2],
    ]);
    out
}
