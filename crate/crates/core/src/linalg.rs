//! Sparse symmetric systems: fixed pattern, reusable symbolic Cholesky.

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt, Lu, SymbolicLlt};
use faer::sparse::{SparseColMat, SparseColMatRef, SymbolicSparseColMatRef, Triplet};
use faer::{Conj, MatMut, Side};

use crate::error::{Error, Result};

/// Lower-triangular CSC pattern of a symmetric matrix.
#[derive(Clone, Debug)]
pub(crate) struct SparsePattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    symbolic: SymbolicLlt<usize>,
}

impl SparsePattern {
    /// Builds the pattern from `(row, col)` entries of the full matrix; the
    /// strictly upper part is ignored and the diagonal is always present.
    pub fn new(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cols: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
        for (r, c) in entries {
            if r > c {
                cols[c].push(r);
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in cols.iter_mut() {
            col.sort_unstable();
            col.dedup();
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let symbolic = SymbolicLlt::try_new(sym, Side::Lower)
            .map_err(|e| Error::LinearSolve(format!("symbolic factorization: {e:?}")))?;
        Ok(SparsePattern {
            n,
            col_ptr,
            row_idx,
            symbolic,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Storage position of entry `(row, col)` with `row >= col`.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        debug_assert!(row >= col);
        let (a, b) = (self.col_ptr[col], self.col_ptr[col + 1]);
        self.row_idx[a..b].binary_search(&row).ok().map(|k| a + k)
    }

    /// Factorizes the matrix with the given values: Cholesky first, LU if the
    /// matrix is not positive definite.
    pub fn factorize(&self, values: &[f64]) -> Result<Factorization> {
        let sym = SymbolicSparseColMatRef::new_checked(
            self.n,
            self.n,
            &self.col_ptr,
            None,
            &self.row_idx,
        );
        let mat = SparseColMatRef::new(sym, values);
        match Llt::try_new_with_symbolic(self.symbolic.clone(), mat, Side::Lower) {
            Ok(llt) => Ok(Factorization::Llt(llt)),
            Err(_) => {
                let mut triplets = Vec::with_capacity(2 * values.len());
                for c in 0..self.n {
                    for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                        let r = self.row_idx[k];
                        triplets.push(Triplet::new(r, c, values[k]));
                        if r != c {
                            triplets.push(Triplet::new(c, r, values[k]));
                        }
                    }
                }
                let full =
                    SparseColMat::<usize, f64>::try_new_from_triplets(self.n, self.n, &triplets)
                        .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
                let lu = full
                    .sp_lu()
                    .map_err(|e| Error::LinearSolve(format!("singular tangent: {e:?}")))?;
                Ok(Factorization::Lu(lu))
            }
        }
    }
}

pub(crate) enum Factorization {
    Llt(Llt<usize, f64>),
    Lu(Lu<usize, f64>),
}

impl Factorization {
    pub fn solve_in_place(&self, rhs: &mut [f64]) -> Result<()> {
        let n = rhs.len();
        let view = MatMut::from_column_major_slice_mut(rhs, n, 1);
        match self {
            Factorization::Llt(f) => f.solve_in_place_with_conj(Conj::No, view),
            Factorization::Lu(f) => f.solve_in_place_with_conj(Conj::No, view),
        }
        if rhs.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::LinearSolve("non-finite solution".into()))
        }
    }
}

/// Solves a general square system given as `(row, col, value)` entries,
/// duplicates summed, by sparse LU.
pub(crate) fn solve_general(
    n: usize,
    entries: &[(usize, usize, f64)],
    rhs: &mut [f64],
) -> Result<()> {
    let triplets: Vec<Triplet<usize, usize, f64>> = entries
        .iter()
        .map(|&(r, c, v)| Triplet::new(r, c, v))
        .collect();
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| Error::LinearSolve(format!("{e:?}")))?;
    let lu = mat
        .sp_lu()
        .map_err(|e| Error::LinearSolve(format!("singular tangent: {e:?}")))?;
    Factorization::Lu(lu).solve_in_place(rhs)
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_and_indefinite() {
        // tridiagonal
        let n = 5;
        let entries: Vec<_> = (0..n)
            .flat_map(|i| [(i, i), (i + 1, i)])
            .filter(|&(r, _)| r < n)
            .collect();
        let p = SparsePattern::new(n, entries).unwrap();
        let mut vals = vec![0.0; p.nnz()];
        for i in 0..n {
            vals[p.position(i, i).unwrap()] = 4.0;
            if i + 1 < n {
                vals[p.position(i + 1, i).unwrap()] = -1.0;
            }
        }
        let x_true = [1.0, -2.0, 0.5, 3.0, -1.0];
        let mut b: Vec<f64> = (0..n)
            .map(|i| {
                4.0 * x_true[i]
                    - if i > 0 { x_true[i - 1] } else { 0.0 }
                    - if i + 1 < n { x_true[i + 1] } else { 0.0 }
            })
            .collect();
        let f = p.factorize(&vals).unwrap();
        assert!(matches!(f, Factorization::Llt(_)));
        f.solve_in_place(&mut b).unwrap();
        for i in 0..n {
            assert!((b[i] - x_true[i]).abs() < 1e-13);
        }
        // make it indefinite
        vals[p.position(2, 2).unwrap()] = -4.0;
        let f = p.factorize(&vals).unwrap();
        assert!(matches!(f, Factorization::Lu(_)));
        let mut rhs = vec![1.0; n];
        f.solve_in_place(&mut rhs).unwrap();
    }
}
