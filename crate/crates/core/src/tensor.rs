//! Fixed-size tensor algebra used throughout the solver.
//!
//! Second-order tensors come in two storages: full 3x3 (`Mat3`) and symmetric
//! six-component (`Sym3`, component order 11, 22, 33, 23, 13, 12, plain tensor
//! components without engineering factors). Fourth-order tensors (`Tensor4`)
//! are stored dense as 81 entries so that every contraction is a plain loop,
//! regardless of which minor/major symmetries a particular tensor happens to
//! have.

use std::ops::{Add, AddAssign, Mul, Sub};

/// Index pairs of the six symmetric components, in storage order.
pub const SYM_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

/// Frobenius weight of each symmetric slot: off-diagonal pairs count twice.
pub const SYM_WEIGHTS: [f64; 6] = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];

/// Index pairs of the nine full components, row-major.
pub const FULL_PAIRS: [(usize, usize); 9] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 0),
    (1, 1),
    (1, 2),
    (2, 0),
    (2, 1),
    (2, 2),
];

/// General second-order tensor, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat3(pub [[f64; 3]; 3]);

/// Symmetric second-order tensor, components 11, 22, 33, 23, 13, 12.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sym3(pub [f64; 6]);

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([[0.0; 3]; 3]);

    pub fn identity() -> Mat3 {
        let mut m = Mat3::ZERO;
        for i in 0..3 {
            m.0[i][i] = 1.0;
        }
        m
    }

    pub fn transpose(&self) -> Mat3 {
        let mut t = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] = self.0[j][i];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate; returns `None` when |det| underflows.
    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d.abs() < f64::MIN_POSITIVE {
            return None;
        }
        let m = &self.0;
        let inv_det = 1.0 / d;
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                let a = m[(j + 1) % 3][(i + 1) % 3] * m[(j + 2) % 3][(i + 2) % 3]
                    - m[(j + 1) % 3][(i + 2) % 3] * m[(j + 2) % 3][(i + 1) % 3];
                out.0[i][j] = a * inv_det;
            }
        }
        Some(out)
    }

    pub fn matmul(&self, rhs: &Mat3) -> Mat3 {
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += self.0[i][k] * rhs.0[k][j];
                }
                out.0[i][j] = s;
            }
        }
        out
    }

    /// Symmetric part as a six-component tensor.
    pub fn sym(&self) -> Sym3 {
        let mut s = [0.0; 6];
        for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
            s[a] = 0.5 * (self.0[i][j] + self.0[j][i]);
        }
        Sym3(s)
    }

    /// Full double contraction A : B.
    pub fn ddot(&self, rhs: &Mat3) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += self.0[i][j] * rhs.0[i][j];
            }
        }
        s
    }

    pub fn frobenius(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .fold(0.0_f64, |acc, &v| acc.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Mat3 {
        let mut out = *self;
        for row in out.0.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        out
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, rhs: Mat3) -> Mat3 {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] += rhs.0[i][j];
            }
        }
        out
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, rhs: Mat3) -> Mat3 {
        let mut out = self;
        for i in 0..3 {
            for j in 0..3 {
                out.0[i][j] -= rhs.0[i][j];
            }
        }
        out
    }
}

impl AddAssign for Mat3 {
    fn add_assign(&mut self, rhs: Mat3) {
        for i in 0..3 {
            for j in 0..3 {
                self.0[i][j] += rhs.0[i][j];
            }
        }
    }
}

impl Mul<f64> for Mat3 {
    type Output = Mat3;
    fn mul(self, s: f64) -> Mat3 {
        self.scale(s)
    }
}

impl Sym3 {
    pub const ZERO: Sym3 = Sym3([0.0; 6]);

    pub fn to_mat3(&self) -> Mat3 {
        let mut m = Mat3::ZERO;
        for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
            m.0[i][j] = self.0[a];
            m.0[j][i] = self.0[a];
        }
        m
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    /// Tensor double contraction, counting off-diagonal pairs twice.
    pub fn ddot(&self, rhs: &Sym3) -> f64 {
        let mut s = 0.0;
        for a in 0..6 {
            s += SYM_WEIGHTS[a] * self.0[a] * rhs.0[a];
        }
        s
    }

    pub fn frobenius(&self) -> f64 {
        self.ddot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Sym3 {
        let mut out = *self;
        for v in out.0.iter_mut() {
            *v *= s;
        }
        out
    }
}

impl Add for Sym3 {
    type Output = Sym3;
    fn add(self, rhs: Sym3) -> Sym3 {
        let mut out = self;
        for a in 0..6 {
            out.0[a] += rhs.0[a];
        }
        out
    }
}

impl Sub for Sym3 {
    type Output = Sym3;
    fn sub(self, rhs: Sym3) -> Sym3 {
        let mut out = self;
        for a in 0..6 {
            out.0[a] -= rhs.0[a];
        }
        out
    }
}

impl AddAssign for Sym3 {
    fn add_assign(&mut self, rhs: Sym3) {
        for a in 0..6 {
            self.0[a] += rhs.0[a];
        }
    }
}

/// Dense fourth-order tensor, entry (i,j,k,l) at ((i*3+j)*3+k)*3+l.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4(pub [f64; 81]);

#[inline]
pub fn t4_idx(i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * 3 + j) * 3 + k) * 3 + l
}

impl Tensor4 {
    pub fn zero() -> Tensor4 {
        Tensor4([0.0; 81])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[t4_idx(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.0[t4_idx(i, j, k, l)] = v;
    }

    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.0[t4_idx(i, j, k, l)] += v;
    }

    /// sigma_ij = C_ijkl eps_kl with a symmetric argument.
    pub fn contract_sym(&self, eps: &Sym3) -> Sym3 {
        let e = eps.to_mat3();
        let mut out = [0.0; 6];
        for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
            let mut s = 0.0;
            for k in 0..3 {
                for l in 0..3 {
                    s += self.get(i, j, k, l) * e.0[k][l];
                }
            }
            out[a] = s;
        }
        Sym3(out)
    }

    /// P_ij = K_ijkl G_kl with a general argument.
    pub fn contract_mat(&self, g: &Mat3) -> Mat3 {
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        s += self.get(i, j, k, l) * g.0[k][l];
                    }
                }
                out.0[i][j] = s;
            }
        }
        out
    }

    /// Acoustic tensor G_ik = C_ijkl xi_j xi_l for a direction xi.
    pub fn acoustic(&self, xi: [f64; 3]) -> Mat3 {
        let mut out = Mat3::ZERO;
        for i in 0..3 {
            for k in 0..3 {
                let mut s = 0.0;
                for j in 0..3 {
                    for l in 0..3 {
                        s += self.get(i, j, k, l) * xi[j] * xi[l];
                    }
                }
                out.0[i][k] = s;
            }
        }
        out
    }

    pub fn add_scaled(&mut self, rhs: &Tensor4, s: f64) {
        for (a, b) in self.0.iter_mut().zip(rhs.0.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.0.iter_mut() {
            *a *= s;
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Major transpose, entry (i,j,k,l) -> (k,l,i,j).
    pub fn major_transpose(&self) -> Tensor4 {
        let mut out = Tensor4::zero();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        out.set(i, j, k, l, self.get(k, l, i, j));
                    }
                }
            }
        }
        out
    }

    /// Largest |C_ijkl - C_klij| over all entries; zero for major-symmetric tensors.
    pub fn major_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        worst = worst.max((self.get(i, j, k, l) - self.get(k, l, i, j)).abs());
                    }
                }
            }
        }
        worst
    }

    /// 6x6 Mandel matrix of a minor-symmetric tensor. Off-diagonal slots carry
    /// sqrt(2) weights so the map is an isometry: inverting the matrix inverts
    /// the tensor on symmetric arguments.
    pub fn mandel(&self) -> [[f64; 6]; 6] {
        let mut m = [[0.0; 6]; 6];
        for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
            for (b, &(k, l)) in SYM_PAIRS.iter().enumerate() {
                let w = SYM_WEIGHTS[a].sqrt() * SYM_WEIGHTS[b].sqrt();
                m[a][b] = w * self.get(i, j, k, l);
            }
        }
        m
    }

    /// Rebuild a minor-symmetric tensor from its Mandel matrix.
    pub fn from_mandel(m: &[[f64; 6]; 6]) -> Tensor4 {
        let mut t = Tensor4::zero();
        for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
            for (b, &(k, l)) in SYM_PAIRS.iter().enumerate() {
                let w = SYM_WEIGHTS[a].sqrt() * SYM_WEIGHTS[b].sqrt();
                let v = m[a][b] / w;
                t.set(i, j, k, l, v);
                t.set(j, i, k, l, v);
                t.set(i, j, l, k, v);
                t.set(j, i, l, k, v);
            }
        }
        t
    }

    /// Inverse on the space of symmetric tensors (requires minor symmetry).
    pub fn inverse_sym(&self) -> Option<Tensor4> {
        let m = self.mandel();
        let mut aug = [[0.0_f64; 12]; 6];
        for a in 0..6 {
            aug[a][..6].copy_from_slice(&m[a]);
            aug[a][6 + a] = 1.0;
        }
        if !gauss_solve_in_place(&mut aug) {
            return None;
        }
        let mut inv = [[0.0; 6]; 6];
        for a in 0..6 {
            inv[a].copy_from_slice(&aug[a][6..]);
        }
        Some(Tensor4::from_mandel(&inv))
    }
}

/// Gauss-Jordan with partial pivoting on a 6x12 augmented block.
fn gauss_solve_in_place(aug: &mut [[f64; 12]; 6]) -> bool {
    for col in 0..6 {
        let pivot = (col..6).max_by(|&a, &b| {
            aug[a][col]
                .abs()
                .partial_cmp(&aug[b][col].abs())
                .expect("pivot comparison")
        });
        let pivot = match pivot {
            Some(p) => p,
            None => return false,
        };
        if aug[pivot][col].abs() < 1e-300 {
            return false;
        }
        aug.swap(col, pivot);
        let d = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= d;
        }
        for row in 0..6 {
            if row != col {
                let f = aug[row][col];
                if f != 0.0 {
                    for k in 0..12 {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
    }
    true
}

/// Solve a small dense system in place (n <= 16), partial pivoting.
/// Returns `None` when the matrix is numerically singular.
pub fn solve_dense_small(a: &mut Vec<Vec<f64>>, b: &mut Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|r| r.len() == n));
    for col in 0..n {
        let mut pivot = col;
        let mut best = -1.0_f64;
        for p in col..n {
            let mag = a[p][col].abs();
            if !mag.is_finite() {
                return None;
            }
            if mag > best {
                best = mag;
                pivot = p;
            }
        }
        if best < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Some(x)
}

/// Symmetric 3x3 solve used by the spectral preconditioner: returns
/// `None` when the matrix has a non-positive pivot (not SPD).
pub fn spd3_inverse(m: &Mat3) -> Option<Mat3> {
    // Cholesky factorization detects loss of positive definiteness, which an
    // adjugate inverse would silently accept.
    let a = &m.0;
    let l00 = a[0][0];
    if l00 <= 0.0 {
        return None;
    }
    let l00 = l00.sqrt();
    let l10 = a[1][0] / l00;
    let l20 = a[2][0] / l00;
    let d11 = a[1][1] - l10 * l10;
    if d11 <= 0.0 {
        return None;
    }
    let l11 = d11.sqrt();
    let l21 = (a[2][1] - l20 * l10) / l11;
    let d22 = a[2][2] - l20 * l20 - l21 * l21;
    if d22 <= 0.0 {
        return None;
    }
    let l22 = d22.sqrt();

    // Invert L (lower triangular), then M^-1 = L^-T L^-1.
    let i00 = 1.0 / l00;
    let i11 = 1.0 / l11;
    let i22 = 1.0 / l22;
    let i10 = -l10 * i00 * i11;
    let i21 = -l21 * i11 * i22;
    let i20 = (l10 * l21 - l20 * l11) * i00 * i11 * i22;

    let mut out = Mat3::ZERO;
    out.0[0][0] = i00 * i00 + i10 * i10 + i20 * i20;
    out.0[0][1] = i10 * i11 + i20 * i21;
    out.0[0][2] = i20 * i22;
    out.0[1][1] = i11 * i11 + i21 * i21;
    out.0[1][2] = i21 * i22;
    out.0[2][2] = i22 * i22;
    out.0[1][0] = out.0[0][1];
    out.0[2][0] = out.0[0][2];
    out.0[2][1] = out.0[1][2];
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_mat() -> Mat3 {
        Mat3([[2.0, 0.3, -0.1], [0.4, 1.5, 0.2], [-0.2, 0.1, 1.8]])
    }

    #[test]
    fn mat3_inverse_roundtrip() {
        let m = sample_mat();
        let inv = m.inverse().unwrap();
        let id = m.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(id.0[i][j], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sym3_frobenius_counts_off_diagonals_twice() {
        let s = Sym3([0.0, 0.0, 0.0, 0.0, 0.0, 3.0]);
        // Full tensor has entries (0,1) and (1,0) equal to 3.
        assert_relative_eq!(s.frobenius(), (18.0_f64).sqrt(), epsilon = 1e-14);
        assert_relative_eq!(s.frobenius(), s.to_mat3().frobenius(), epsilon = 1e-14);
    }

    #[test]
    fn sym_roundtrip_through_mat3() {
        let s = Sym3([1.0, -2.0, 0.5, 0.25, -0.75, 2.0]);
        assert_eq!(s.to_mat3().sym(), s);
    }

    #[test]
    fn tensor4_contractions_agree_on_symmetric_input() {
        // A tensor with minor symmetries: contract_sym must match contract_mat.
        let mut c = Tensor4::zero();
        let mut seed = 1.0_f64;
        for (a, &(i, j)) in SYM_PAIRS.iter().enumerate() {
            for (b, &(k, l)) in SYM_PAIRS.iter().enumerate() {
                seed = (seed * 1.618 + a as f64 + 0.7 * b as f64).rem_euclid(2.0) - 1.0;
                for (ii, jj) in [(i, j), (j, i)] {
                    for (kk, ll) in [(k, l), (l, k)] {
                        c.set(ii, jj, kk, ll, seed);
                    }
                }
            }
        }
        let e = Sym3([0.1, -0.2, 0.3, 0.05, -0.15, 0.25]);
        let via_sym = c.contract_sym(&e).to_mat3();
        let via_mat = c.contract_mat(&e.to_mat3());
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(via_sym.0[i][j], via_mat.0[i][j], epsilon = 1e-13);
            }
        }

        let inv = c.inverse_sym().expect("invertible sample");
        let back = inv.contract_sym(&c.contract_sym(&e));
        for a in 0..6 {
            assert_relative_eq!(back.0[a], e.0[a], epsilon = 1e-9);
        }
    }

    #[test]
    fn spd3_inverse_matches_adjugate_and_rejects_indefinite() {
        let spd = Mat3([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 5.0]]);
        let a = spd3_inverse(&spd).unwrap();
        let b = spd.inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(a.0[i][j], b.0[i][j], epsilon = 1e-12);
            }
        }
        let indef = Mat3([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(spd3_inverse(&indef).is_none());
    }

    #[test]
    fn dense_solve_recovers_known_solution() {
        let a0 = vec![
            vec![2.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 4.0],
        ];
        let x_true = [0.5, -1.0, 2.0];
        let mut b = vec![0.0; 3];
        for i in 0..3 {
            b[i] = a0[i].iter().zip(x_true.iter()).map(|(a, x)| a * x).sum();
        }
        let mut a = a0.clone();
        let x = solve_dense_small(&mut a, &mut b).unwrap();
        for i in 0..3 {
            assert_relative_eq!(x[i], x_true[i], epsilon = 1e-12);
        }
    }
}
