//! Second- and fourth-order tensors of the in-plane (2D) block.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub};

use nalgebra::{Matrix2, Matrix4};
use serde::{Deserialize, Serialize};

/// A 2×2 tensor, e.g. a deformation gradient or a PK1 stress.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensor2(pub Matrix2<f64>);

impl Tensor2 {
    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Tensor2(Matrix2::new(a11, a12, a21, a22))
    }

    pub fn zeros() -> Self {
        Tensor2(Matrix2::zeros())
    }

    pub fn identity() -> Self {
        Tensor2(Matrix2::identity())
    }

    pub fn diag(a11: f64, a22: f64) -> Self {
        Self::new(a11, 0.0, 0.0, a22)
    }

    /// Counter-clockwise rotation by `theta` radians.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c, -s, s, c)
    }

    /// Symmetric tensor from its three independent components.
    pub fn symmetric(a11: f64, a22: f64, a12: f64) -> Self {
        Self::new(a11, a12, a12, a22)
    }

    /// Row-major components `[a11, a12, a21, a22]`.
    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self[(0, 0)], self[(0, 1)], self[(1, 0)], self[(1, 1)]]
    }

    /// Unit tensor `e_i ⊗ e_j`.
    pub fn unit(i: usize, j: usize) -> Self {
        let mut t = Self::zeros();
        t[(i, j)] = 1.0;
        t
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
    }

    pub fn trace(&self) -> f64 {
        self.0[(0, 0)] + self.0[(1, 1)]
    }

    pub fn transpose(&self) -> Self {
        Tensor2(self.0.transpose())
    }

    /// Closed-form inverse, `None` for a singular tensor.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let m = &self.0;
        Some(Self::new(
            m[(1, 1)] / det,
            -m[(0, 1)] / det,
            -m[(1, 0)] / det,
            m[(0, 0)] / det,
        ))
    }

    /// Double contraction `A : B = A_ij B_ij`.
    pub fn ddot(&self, other: &Self) -> f64 {
        self.0.component_mul(&other.0).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self[(0, 1)] - self[(1, 0)]).abs() <= tol
    }
}

impl Index<(usize, usize)> for Tensor2 {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl IndexMut<(usize, usize)> for Tensor2 {
    fn index_mut(&mut self, idx: (usize, usize)) -> &mut f64 {
        &mut self.0[idx]
    }
}

impl Add for Tensor2 {
    type Output = Tensor2;
    fn add(self, rhs: Tensor2) -> Tensor2 {
        Tensor2(self.0 + rhs.0)
    }
}

impl AddAssign for Tensor2 {
    fn add_assign(&mut self, rhs: Tensor2) {
        self.0 += rhs.0;
    }
}

impl Sub for Tensor2 {
    type Output = Tensor2;
    fn sub(self, rhs: Tensor2) -> Tensor2 {
        Tensor2(self.0 - rhs.0)
    }
}

impl Neg for Tensor2 {
    type Output = Tensor2;
    fn neg(self) -> Tensor2 {
        Tensor2(-self.0)
    }
}

impl Mul for Tensor2 {
    type Output = Tensor2;
    fn mul(self, rhs: Tensor2) -> Tensor2 {
        Tensor2(self.0 * rhs.0)
    }
}

impl Mul<f64> for Tensor2 {
    type Output = Tensor2;
    fn mul(self, rhs: f64) -> Tensor2 {
        Tensor2(self.0 * rhs)
    }
}

impl Mul<Tensor2> for f64 {
    type Output = Tensor2;
    fn mul(self, rhs: Tensor2) -> Tensor2 {
        Tensor2(rhs.0 * self)
    }
}

#[inline]
fn flat(i: usize, j: usize) -> usize {
    2 * i + j
}

/// A 2×2×2×2 tensor stored as a 4×4 matrix with row `2i+j`, column `2k+l`.
///
/// With this layout the contraction `A : dF` is a matrix-vector product on the
/// row-major flattening of `dF`, which is what the FE assembly needs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensor4(pub Matrix4<f64>);

impl Tensor4 {
    pub fn zeros() -> Self {
        Tensor4(Matrix4::zeros())
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        t.0[(flat(i, j), flat(k, l))] = f(i, j, k, l);
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[(flat(i, j), flat(k, l))]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.0[(flat(i, j), flat(k, l))] = v;
    }

    /// `(A : B)_ij = A_ijkl B_kl`.
    pub fn contract(&self, b: &Tensor2) -> Tensor2 {
        let v = self.0 * nalgebra::Vector4::from(b.to_array());
        Tensor2::new(v[0], v[1], v[2], v[3])
    }

    /// Sets the `(k,l)` "column" slice `A_ij(kl)` to the given tensor.
    pub fn set_column(&mut self, k: usize, l: usize, col: &Tensor2) {
        for i in 0..2 {
            for j in 0..2 {
                self.set(i, j, k, l, col[(i, j)]);
            }
        }
    }

    /// The `(k,l)` slice `A_ij(kl)` as a 2×2 tensor.
    pub fn column(&self, k: usize, l: usize) -> Tensor2 {
        Tensor2::new(
            self.get(0, 0, k, l),
            self.get(0, 1, k, l),
            self.get(1, 0, k, l),
            self.get(1, 1, k, l),
        )
    }

    /// Major transpose `A_klij`.
    pub fn major_transpose(&self) -> Self {
        Tensor4(self.0.transpose())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Tensor4 {
    type Output = Tensor4;
    fn add(self, rhs: Tensor4) -> Tensor4 {
        Tensor4(self.0 + rhs.0)
    }
}

impl Sub for Tensor4 {
    type Output = Tensor4;
    fn sub(self, rhs: Tensor4) -> Tensor4 {
        Tensor4(self.0 - rhs.0)
    }
}

impl Mul<f64> for Tensor4 {
    type Output = Tensor4;
    fn mul(self, rhs: f64) -> Tensor4 {
        Tensor4(self.0 * rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_det() {
        let a = Tensor2::new(2.0, 1.0, 0.5, 3.0);
        let inv = a.inverse().unwrap();
        assert!(((a * inv) - Tensor2::identity()).norm() < 1e-15);
        assert_eq!(a.det(), 5.5);
        assert!(Tensor2::new(1.0, 2.0, 2.0, 4.0).inverse().is_none());
    }

    #[test]
    fn contraction_layout() {
        let a = Tensor4::from_fn(|i, j, k, l| (i * 8 + j * 4 + k * 2 + l) as f64);
        let b = Tensor2::unit(1, 0);
        let c = a.contract(&b);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c[(i, j)], a.get(i, j, 1, 0));
            }
        }
        assert_eq!(a.column(1, 0), c);
    }
}
