//! Periodic voxel grid and the 3D transform engine behind it.
//!
//! Grids are restricted to odd voxel counts on every axis so that each
//! frequency has a conjugate partner and no Nyquist mode exists. The discrete
//! frequency set per axis is
//!
//! ```text
//!     xi_k = 2 pi m(k) / l,    m(k) in {-(n-1)/2, ..., 0, ..., (n-1)/2},
//! ```
//!
//! stored in the transform's native bin order (m = k for k <= (n-1)/2, then
//! m = k - n), which is the centered list permuted once at construction.
//!
//! Transform normalization: `forward` is the plain unnormalized DFT sum, so a
//! constant field c maps to n1*n2*n3*c at the zero frequency; `inverse`
//! divides by n1*n2*n3. Inverse outputs are validated to be real: an
//! imaginary residue above 1e-12 relative to the real amplitude is an error.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::errors::{CoreError, Result};

/// Relative imaginary residue tolerated when an inverse transform is cast
/// back to a real field.
pub const CONJUGATE_SYMMETRY_REL_TOL: f64 = 1e-12;

/// Shape of a periodic cell: voxel counts and edge lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridShape {
    pub n: [usize; 3],
    pub l: [f64; 3],
}

impl GridShape {
    pub fn nvox(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    /// Voxel edge lengths.
    pub fn spacing(&self) -> [f64; 3] {
        [
            self.l[0] / self.n[0] as f64,
            self.l[1] / self.n[1] as f64,
            self.l[2] / self.n[2] as f64,
        ]
    }

    /// Linear index of voxel (i1, i2, i3); the first axis is fastest.
    #[inline]
    pub fn index(&self, i: [usize; 3]) -> usize {
        i[0] + self.n[0] * (i[1] + self.n[1] * i[2])
    }

    /// Inverse of `index`.
    #[inline]
    pub fn coords(&self, v: usize) -> [usize; 3] {
        [
            v % self.n[0],
            (v / self.n[0]) % self.n[1],
            v / (self.n[0] * self.n[1]),
        ]
    }

    /// Center of voxel (i1, i2, i3) in cell coordinates.
    pub fn center(&self, i: [usize; 3]) -> [f64; 3] {
        let h = self.spacing();
        [
            (i[0] as f64 + 0.5) * h[0],
            (i[1] as f64 + 0.5) * h[1],
            (i[2] as f64 + 0.5) * h[2],
        ]
    }
}

/// Periodic grid with cached transform plans and native-order frequencies.
#[derive(Clone)]
pub struct Grid {
    shape: GridShape,
    freq: [Vec<f64>; 3],
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid")
            .field("n", &self.shape.n)
            .field("l", &self.shape.l)
            .finish()
    }
}

impl Grid {
    /// Build a grid; every axis must have an odd voxel count >= 3 and a
    /// positive edge length.
    pub fn new(n: [usize; 3], l: [f64; 3]) -> Result<Grid> {
        if n.iter().any(|&ni| ni < 3 || ni % 2 == 0) {
            return Err(CoreError::InvalidGridSize { n });
        }
        if l.iter().any(|&li| !li.is_finite() || li <= 0.0) {
            return Err(CoreError::InvalidCellLength { l });
        }
        let freq = [
            axis_frequencies(n[0], l[0]),
            axis_frequencies(n[1], l[1]),
            axis_frequencies(n[2], l[2]),
        ];
        let mut planner = FftPlanner::new();
        let fwd = [
            planner.plan_fft(n[0], FftDirection::Forward),
            planner.plan_fft(n[1], FftDirection::Forward),
            planner.plan_fft(n[2], FftDirection::Forward),
        ];
        let inv = [
            planner.plan_fft(n[0], FftDirection::Inverse),
            planner.plan_fft(n[1], FftDirection::Inverse),
            planner.plan_fft(n[2], FftDirection::Inverse),
        ];
        Ok(Grid {
            shape: GridShape { n, l },
            freq,
            fwd,
            inv,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn n(&self) -> [usize; 3] {
        self.shape.n
    }

    pub fn l(&self) -> [f64; 3] {
        self.shape.l
    }

    pub fn nvox(&self) -> usize {
        self.shape.nvox()
    }

    /// Frequencies along one axis, in native transform bin order.
    pub fn freq(&self, axis: usize) -> &[f64] {
        &self.freq[axis]
    }

    /// Frequency vector of the spectral voxel with linear index `v`.
    #[inline]
    pub fn xi(&self, v: usize) -> [f64; 3] {
        let c = self.shape.coords(v);
        [self.freq[0][c[0]], self.freq[1][c[1]], self.freq[2][c[2]]]
    }

    /// In-place unnormalized forward 3D transform of one scalar component.
    pub(crate) fn fft3(&self, buf: &mut [Complex64], forward: bool) {
        let [n0, n1, n2] = self.shape.n;
        let nvox = self.shape.nvox();
        assert_eq!(buf.len(), nvox);
        let plans = if forward { &self.fwd } else { &self.inv };

        // Axis 0: rows are contiguous.
        process_rows(buf, n0, plans[0].as_ref());

        let mut tmp = vec![Complex64::new(0.0, 0.0); nvox];

        // Axis 1: permute to axis-1-fastest, transform, permute back.
        permute_swap01(buf, &mut tmp, n0, n1, n2);
        process_rows(&mut tmp, n1, plans[1].as_ref());
        permute_swap01(&tmp, buf, n1, n0, n2);

        // Axis 2: permute to axis-2-fastest, transform, permute back.
        permute_to_axis2(buf, &mut tmp, n0, n1, n2);
        process_rows(&mut tmp, n2, plans[2].as_ref());
        permute_from_axis2(&tmp, buf, n0, n1, n2);

        if !forward {
            let scale = 1.0 / nvox as f64;
            buf.par_iter_mut().for_each(|z| *z *= scale);
        }
    }
}

/// Native-order frequency list for one axis: 2 pi m / l with m = k for the
/// first half, m = k - n for the second.
fn axis_frequencies(n: usize, l: f64) -> Vec<f64> {
    let step = 2.0 * std::f64::consts::PI / l;
    (0..n)
        .map(|k| {
            let m = if k <= (n - 1) / 2 {
                k as isize
            } else {
                k as isize - n as isize
            };
            m as f64 * step
        })
        .collect()
}

/// Run a 1D plan over every contiguous row of length `n`, in parallel chunks.
fn process_rows(data: &mut [Complex64], n: usize, plan: &dyn Fft<f64>) {
    let rows = data.len() / n;
    let threads = rayon::current_num_threads().max(1);
    let rows_per_chunk = rows.div_ceil(4 * threads).max(1);
    data.par_chunks_mut(n * rows_per_chunk)
        .for_each_init(
            || vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()],
            |scratch, chunk| plan.process_with_scratch(chunk, scratch),
        );
}

/// dst[i1 + n1*(i0 + n0*i2)] = src[i0 + n0*(i1 + n1*i2)]; swapping the two
/// fastest axes is an involution, so the same routine (with n0 and n1
/// exchanged) permutes back.
fn permute_swap01(src: &[Complex64], dst: &mut [Complex64], n0: usize, n1: usize, _n2: usize) {
    dst.par_chunks_mut(n0 * n1).enumerate().for_each(|(i2, slab)| {
        let base = n0 * n1 * i2;
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                slab[i1 + n1 * i0] = src[base + i0 + n0 * i1];
            }
        }
    });
}

/// dst[i2 + n2*(i0 + n0*i1)] = src[i0 + n0*(i1 + n1*i2)].
fn permute_to_axis2(src: &[Complex64], dst: &mut [Complex64], n0: usize, n1: usize, n2: usize) {
    dst.par_chunks_mut(n2).enumerate().for_each(|(c, row)| {
        let i0 = c % n0;
        let i1 = c / n0;
        for (i2, v) in row.iter_mut().enumerate() {
            *v = src[i0 + n0 * (i1 + n1 * i2)];
        }
    });
}

/// Inverse of `permute_to_axis2`.
fn permute_from_axis2(src: &[Complex64], dst: &mut [Complex64], n0: usize, n1: usize, n2: usize) {
    dst.par_chunks_mut(n0).enumerate().for_each(|(r, row)| {
        let i1 = r % n1;
        let i2 = r / n1;
        for (i0, v) in row.iter_mut().enumerate() {
            *v = src[i2 + n2 * (i0 + n0 * i1)];
        }
    });
}
