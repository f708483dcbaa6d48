//! Physics-based convergence measures.
//!
//! A solve is accepted only when three independent residuals pass:
//!
//! * **equilibrium** — the L2 norm of the stress divergence, relative to the
//!   norm of the mean stress;
//! * **compatibility** — the max-norm incompatibility of the strain (or the
//!   curl of the deformation gradient at finite strain), relative to the
//!   norm of the mean strain (or of the mean gradient minus identity);
//! * **loading** — the gap between controlled macroscopic components and
//!   their targets, relative to the norm of the targets.
//!
//! Each ratio degrades gracefully: when its denominator is smaller than
//! [`DENOMINATOR_GUARD`] times the scale of the numerator's field, the raw
//! numerator is reported instead and the `*_absolute` flag is set, so a
//! zero-load solve cannot divide by zero and cannot hide a large error.

use crate::errors::Result;
use crate::field::{RealSymField, RealTensorField, SpectralVectorField};
use crate::grid::Grid;
use crate::operators::{curl, curl_curl, div_sym, div_tensor, grad, sym_grad};
use crate::tensor::Mat3;

/// Relative floor under which a residual denominator is treated as zero.
pub const DENOMINATOR_GUARD: f64 = 1e-14;

/// The three residuals of one converged (or converging) solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTriple {
    pub equilibrium: f64,
    pub compatibility: f64,
    pub loading: f64,
    /// Set when the corresponding denominator vanished and the raw
    /// numerator is reported instead of a ratio.
    pub equilibrium_absolute: bool,
    pub compatibility_absolute: bool,
    pub loading_absolute: bool,
}

impl ResidualTriple {
    pub fn max(&self) -> f64 {
        self.equilibrium.max(self.compatibility).max(self.loading)
    }

    pub fn satisfies(&self, tol: &ResidualTolerances) -> bool {
        self.equilibrium <= tol.equilibrium
            && self.compatibility <= tol.compatibility
            && self.loading <= tol.loading
    }
}

/// Acceptance thresholds for the residual triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTolerances {
    pub equilibrium: f64,
    pub compatibility: f64,
    pub loading: f64,
}

impl Default for ResidualTolerances {
    fn default() -> Self {
        ResidualTolerances {
            equilibrium: 1e-8,
            compatibility: 1e-10,
            loading: 1e-10,
        }
    }
}

pub(crate) fn guarded_ratio(numerator: f64, denominator: f64, scale: f64) -> (f64, bool) {
    if denominator <= DENOMINATOR_GUARD * scale.max(f64::MIN_POSITIVE) {
        (numerator, true)
    } else {
        (numerator / denominator, false)
    }
}

/// ||div sigma||_L2 / ||<sigma>||_F for a small-strain stress field.
pub fn equilibrium_residual_sym(grid: &Grid, sigma: &RealSymField) -> Result<(f64, bool)> {
    let spec = grid.forward(sigma)?;
    let div = grid.inverse_diagnostic(&div_sym(grid, &spec)?)?;
    let numerator = div.l2_norm(&[1.0; 3]);
    let mean = sigma.mean_sym().to_mat3().frobenius();
    Ok(guarded_ratio(numerator, mean, sigma.max_abs()))
}

/// ||div P||_L2 / ||<P>||_F for a first Piola-Kirchhoff stress field.
pub fn equilibrium_residual_tensor(grid: &Grid, p: &RealTensorField) -> Result<(f64, bool)> {
    let spec = grid.forward(p)?;
    let div = grid.inverse_diagnostic(&div_tensor(grid, &spec)?)?;
    let numerator = div.l2_norm(&[1.0; 3]);
    let mean = p.mean_mat().frobenius();
    Ok(guarded_ratio(numerator, mean, p.max_abs()))
}

/// max |inc(eps)| / ||<eps>||_F, where inc is the double-curl
/// incompatibility operator that annihilates exactly the symmetric
/// gradients.
pub fn compatibility_residual_sym(grid: &Grid, eps: &RealSymField) -> Result<(f64, bool)> {
    let spec = grid.forward(eps)?;
    let inc = grid.inverse_diagnostic(&curl_curl(grid, &spec)?)?;
    let numerator = inc.max_abs();
    let mean = eps.mean_sym().to_mat3().frobenius();
    Ok(guarded_ratio(numerator, mean, eps.max_abs()))
}

/// max |curl F| / ||<F> - I||_F; the curl of a deformation-gradient field
/// vanishes iff the field is a gradient.
pub fn compatibility_residual_tensor(grid: &Grid, f: &RealTensorField) -> Result<(f64, bool)> {
    let spec = grid.forward(f)?;
    let c = grid.inverse_diagnostic(&curl(grid, &spec)?)?;
    let numerator = c.max_abs();
    let mean = (f.mean_mat() - Mat3::identity()).frobenius();
    Ok(guarded_ratio(numerator, mean, f.max_abs()))
}

/// Incompatibility numerator max |∇×(∇×(sym ∇u))| evaluated by
/// differentiating the displacement spectrum directly.
///
/// When the strain field is *defined* by spectral differentiation of a
/// displacement, measuring its incompatibility from the real-space samples
/// requires a forward transform that deposits round-off of the full field
/// amplitude onto every frequency; the double curl then amplifies the
/// high-frequency share by |ξ|². Differentiating the spectrum the solver
/// already owns skips that round trip, so the numerator reflects only the
/// cancellation error of the curl-curl identity itself — about an order of
/// magnitude lower on strongly heterogeneous solutions. The imposed mean
/// strain lives at ξ = 0, which both curls annihilate exactly, so it needs
/// no separate handling.
pub fn incompatibility_max_of_displacement(
    grid: &Grid,
    u_hat: &SpectralVectorField,
) -> Result<f64> {
    let inc = grid.inverse_diagnostic(&curl_curl(grid, &sym_grad(grid, u_hat)?)?)?;
    Ok(inc.max_abs())
}

/// Curl numerator max |∇₀×(∇₀u)| for the finite-strain compatibility
/// measure, evaluated from the displacement spectrum for the same reason as
/// [`incompatibility_max_of_displacement`]: the constant part of the
/// deformation gradient sits at ξ = 0 where the curl vanishes exactly, and
/// skipping the real-to-spectral round trip keeps transform noise off the
/// high frequencies.
pub fn curl_max_of_displacement(grid: &Grid, u_hat: &SpectralVectorField) -> Result<f64> {
    let c = grid.inverse_diagnostic(&curl(grid, &grad(grid, u_hat)?)?)?;
    Ok(c.max_abs())
}

/// Root-sum-square gap over the controlled components, relative to the
/// root-sum-square of the targets. `pairs` holds (target, achieved).
pub fn loading_residual(pairs: &[(f64, f64)]) -> (f64, bool) {
    if pairs.is_empty() {
        return (0.0, false);
    }
    let mut gap = 0.0;
    let mut tgt = 0.0;
    let mut scale: f64 = 0.0;
    for &(t, a) in pairs {
        gap += (t - a) * (t - a);
        tgt += t * t;
        scale = scale.max(t.abs()).max(a.abs());
    }
    guarded_ratio(gap.sqrt(), tgt.sqrt(), scale)
}

/// Relative max-norm distance between two fields of the same shape:
/// max |a - b| / max(max|a|, max|b|); zero when both fields vanish.
pub fn field_diff<const C: usize>(
    a: &crate::field::RealField<C>,
    b: &crate::field::RealField<C>,
) -> f64 {
    assert_eq!(a.shape(), b.shape(), "field_diff requires matching shapes");
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0_f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        worst = worst.max((x - y).abs());
    }
    worst / scale
}
