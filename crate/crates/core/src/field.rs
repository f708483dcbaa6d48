//! Voxel fields over a periodic grid, in real and spectral form.
//!
//! A field stores `C` components per voxel, voxel-major (all components of a
//! voxel adjacent), with the first grid axis fastest. `C = 3` holds vectors,
//! `C = 6` symmetric second-order tensors (component order 11, 22, 33, 23,
//! 13, 12) and `C = 9` general second-order tensors (row-major).

use num_complex::Complex64;
use rayon::prelude::*;

use crate::errors::{CoreError, Result};
use crate::grid::{Grid, GridShape, CONJUGATE_SYMMETRY_REL_TOL};
use crate::tensor::{Mat3, Sym3};

/// Real-valued field with `C` components per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct RealField<const C: usize> {
    shape: GridShape,
    data: Vec<f64>,
}

/// Complex-valued spectral field with `C` components per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField<const C: usize> {
    shape: GridShape,
    data: Vec<Complex64>,
}

pub type RealVectorField = RealField<3>;
pub type RealSymField = RealField<6>;
pub type RealTensorField = RealField<9>;
pub type SpectralVectorField = SpectralField<3>;
pub type SpectralSymField = SpectralField<6>;
pub type SpectralTensorField = SpectralField<9>;

impl<const C: usize> RealField<C> {
    pub fn zeros(shape: GridShape) -> Self {
        RealField {
            shape,
            data: vec![0.0; shape.nvox() * C],
        }
    }

    /// Build a field by evaluating a closure at every voxel index.
    pub fn from_fn(shape: GridShape, f: impl Fn(usize) -> [f64; C] + Sync) -> Self {
        let mut field = RealField::zeros(shape);
        field
            .data
            .par_chunks_mut(C)
            .enumerate()
            .for_each(|(v, chunk)| chunk.copy_from_slice(&f(v)));
        field
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> [f64; C] {
        let mut out = [0.0; C];
        out.copy_from_slice(&self.data[v * C..(v + 1) * C]);
        out
    }

    #[inline]
    pub fn set_voxel(&mut self, v: usize, vals: [f64; C]) {
        self.data[v * C..(v + 1) * C].copy_from_slice(&vals);
    }

    #[inline]
    pub fn at(&self, v: usize, c: usize) -> f64 {
        self.data[v * C + c]
    }

    /// Component-wise volume average. Serial on purpose: a fixed summation
    /// order keeps repeated runs bitwise identical.
    pub fn mean(&self) -> [f64; C] {
        let mut acc = [0.0; C];
        for chunk in self.data.chunks_exact(C) {
            for c in 0..C {
                acc[c] += chunk[c];
            }
        }
        let inv = 1.0 / self.shape.nvox() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        acc
    }

    /// Remove the volume average of every component.
    pub fn subtract_mean(&mut self) {
        let m = self.mean();
        self.data.par_chunks_mut(C).for_each(|chunk| {
            for c in 0..C {
                chunk[c] -= m[c];
            }
        });
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Root of the voxel mean of the weighted squared component sum; the
    /// weights let symmetric storage count off-diagonal pairs twice.
    pub fn l2_norm(&self, weights: &[f64; C]) -> f64 {
        let mut acc = 0.0;
        for chunk in self.data.chunks_exact(C) {
            for c in 0..C {
                acc += weights[c] * chunk[c] * chunk[c];
            }
        }
        (acc / self.shape.nvox() as f64).sqrt()
    }

    /// Weighted voxel-mean inner product.
    pub fn dot(&self, other: &Self, weights: &[f64; C]) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        let mut acc = 0.0;
        for (a, b) in self
            .data
            .chunks_exact(C)
            .zip(other.data.chunks_exact(C))
        {
            for c in 0..C {
                acc += weights[c] * a[c] * b[c];
            }
        }
        acc / self.shape.nvox() as f64
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        debug_assert_eq!(self.shape, x.shape);
        self.data
            .par_iter_mut()
            .zip(x.data.par_iter())
            .for_each(|(s, xv)| *s += a * xv);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.par_iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, value: [f64; C]) {
        self.data
            .par_chunks_mut(C)
            .for_each(|chunk| chunk.copy_from_slice(&value));
    }
}

impl RealField<6> {
    #[inline]
    pub fn sym_at(&self, v: usize) -> Sym3 {
        Sym3(self.voxel(v))
    }

    pub fn mean_sym(&self) -> Sym3 {
        Sym3(self.mean())
    }
}

impl RealField<9> {
    #[inline]
    pub fn mat_at(&self, v: usize) -> Mat3 {
        let d = self.voxel(v);
        Mat3([[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]])
    }

    #[inline]
    pub fn set_mat(&mut self, v: usize, m: Mat3) {
        self.set_voxel(
            v,
            [
                m.0[0][0], m.0[0][1], m.0[0][2], m.0[1][0], m.0[1][1], m.0[1][2], m.0[2][0],
                m.0[2][1], m.0[2][2],
            ],
        );
    }

    pub fn mean_mat(&self) -> Mat3 {
        let d = self.mean();
        Mat3([[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]])
    }
}

impl<const C: usize> SpectralField<C> {
    pub fn zeros(shape: GridShape) -> Self {
        SpectralField {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.nvox() * C],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, v: usize, c: usize) -> Complex64 {
        self.data[v * C + c]
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> [Complex64; C] {
        let mut out = [Complex64::new(0.0, 0.0); C];
        out.copy_from_slice(&self.data[v * C..(v + 1) * C]);
        out
    }

    #[inline]
    pub fn set_voxel(&mut self, v: usize, vals: [Complex64; C]) {
        self.data[v * C..(v + 1) * C].copy_from_slice(&vals);
    }
}

impl Grid {
    fn check_shape(&self, shape: GridShape) -> Result<()> {
        if shape != self.shape() {
            return Err(CoreError::ShapeMismatch {
                expected: self.n(),
                got: shape.n,
            });
        }
        Ok(())
    }

    /// Unnormalized forward transform of every component.
    pub fn forward<const C: usize>(&self, field: &RealField<C>) -> Result<SpectralField<C>> {
        self.check_shape(field.shape)?;
        let nvox = self.nvox();
        let mut out = SpectralField::<C>::zeros(field.shape);
        let mut buf = vec![Complex64::new(0.0, 0.0); nvox];
        for c in 0..C {
            buf.par_iter_mut().enumerate().for_each(|(v, z)| {
                *z = Complex64::new(field.data[v * C + c], 0.0);
            });
            self.fft3(&mut buf, true);
            out.data
                .par_chunks_mut(C)
                .zip(buf.par_iter())
                .for_each(|(chunk, z)| chunk[c] = *z);
        }
        Ok(out)
    }

    /// Normalized inverse transform; fails if the result is not real to
    /// within `CONJUGATE_SYMMETRY_REL_TOL` (relative to the real amplitude).
    pub fn inverse<const C: usize>(&self, field: &SpectralField<C>) -> Result<RealField<C>> {
        self.inverse_impl(field, true)
    }

    /// Inverse transform without the conjugate-symmetry guard.
    ///
    /// Reserved for spectra produced by operators that annihilate their
    /// argument (incompatibility of a compatible strain, divergence of an
    /// equilibrated stress): there the entire spectrum is cancellation
    /// residue whose Hermitian violation is the same size as its value, so
    /// the guard would reject exactly the fields a converged solve produces.
    /// The real part is still the meaningful content; the imaginary part is
    /// transform roundoff of the same magnitude as the real noise floor.
    pub fn inverse_diagnostic<const C: usize>(
        &self,
        field: &SpectralField<C>,
    ) -> Result<RealField<C>> {
        self.inverse_impl(field, false)
    }

    fn inverse_impl<const C: usize>(
        &self,
        field: &SpectralField<C>,
        checked: bool,
    ) -> Result<RealField<C>> {
        self.check_shape(field.shape)?;
        let nvox = self.nvox();
        let mut out = RealField::<C>::zeros(field.shape);
        let mut buf = vec![Complex64::new(0.0, 0.0); nvox];
        let mut im_max = 0.0_f64;
        let mut re_max = 0.0_f64;
        // The imaginary residue of a Hermitian-symmetric inverse scales with
        // the input spectrum, not with the output: track the input scale
        // (per-voxel) alongside re_max so legitimately small outputs of
        // large spectra are not rejected.
        let mut in_scale = 0.0_f64;
        if checked {
            for z in field.data.iter() {
                in_scale = in_scale.max(z.re.abs()).max(z.im.abs());
            }
            in_scale /= nvox as f64;
        }
        for c in 0..C {
            buf.par_iter_mut()
                .enumerate()
                .for_each(|(v, z)| *z = field.data[v * C + c]);
            self.fft3(&mut buf, false);
            if checked {
                for z in buf.iter() {
                    im_max = im_max.max(z.im.abs());
                    re_max = re_max.max(z.re.abs());
                }
            }
            out.data
                .par_chunks_mut(C)
                .zip(buf.par_iter())
                .for_each(|(chunk, z)| chunk[c] = z.re);
        }
        if checked {
            let allowed =
                CONJUGATE_SYMMETRY_REL_TOL * re_max.max(in_scale).max(f64::MIN_POSITIVE);
            if im_max > allowed {
                return Err(CoreError::ConjugateSymmetry { im_max, allowed });
            }
        }
        Ok(out)
    }
}
