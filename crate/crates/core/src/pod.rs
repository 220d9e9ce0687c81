//! Proper orthogonal decomposition of stress-field snapshots (method of
//! snapshots with the quadrature-weighted L² inner product).

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro_fem::QuadratureStressField;
use crate::snapshot::SnapshotSet;
use crate::tensor_mech::Tensor2;

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RELATIVE_CUTOFF: f64 = 1e-12;

/// Number of basis functions: an explicit count wins over an energy target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasisSelector {
    pub count: Option<usize>,
    /// Required captured energy fraction, e.g. `0.999996`.
    pub energy: Option<f64>,
}

impl BasisSelector {
    pub fn count(l: usize) -> Self {
        BasisSelector {
            count: Some(l),
            energy: None,
        }
    }

    pub fn energy(e: f64) -> Self {
        BasisSelector {
            count: None,
            energy: Some(e),
        }
    }
}

/// `Σ_q w_q a_q : b_q`.
pub fn inner(a: &[[f64; 4]], b: &[[f64; 4]], weights: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), w)| w * (x[0] * y[0] + x[1] * y[1] + x[2] * y[2] + x[3] * y[3]))
        .sum()
}

pub fn l2_norm(a: &[[f64; 4]], weights: &[f64]) -> f64 {
    inner(a, a, weights).max(0.0).sqrt()
}

/// Symmetric matrix of pairwise L² inner products of the snapshots.
pub fn correlation_matrix(set: &SnapshotSet) -> Result<DMatrix<f64>> {
    set.validate()?;
    let n = set.len();
    let w = set.weights();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..=i)
                .map(|j| inner(&set.fields[i].stress, &set.fields[j].stress, w))
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if j <= i {
            rows[i][j]
        } else {
            rows[j][i]
        }
    }))
}

/// Orthonormal stress-field basis.
#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    /// `B_l` at every quadrature point, `l = 0..L`.
    pub functions: Vec<Vec<[f64; 4]>>,
    /// Full non-increasing spectrum of the correlation matrix (clamped at 0).
    pub eigenvalues: Vec<f64>,
    pub weights: Arc<[f64]>,
    pub total_volume: f64,
    /// `Σ_{l<L} λ_l / Σ λ_l`.
    pub energy_captured: f64,
}

impl PodBasis {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn num_quadrature_points(&self) -> usize {
        self.weights.len()
    }

    /// The first `l` functions.
    pub fn truncated(&self, l: usize) -> Result<PodBasis> {
        if l == 0 || l > self.len() {
            return Err(Error::InvalidInput(format!(
                "cannot truncate a basis of {} to {l}",
                self.len()
            )));
        }
        let total: f64 = self.eigenvalues.iter().sum();
        Ok(PodBasis {
            functions: self.functions[..l].to_vec(),
            eigenvalues: self.eigenvalues.clone(),
            weights: self.weights.clone(),
            total_volume: self.total_volume,
            energy_captured: self.eigenvalues[..l].iter().sum::<f64>() / total,
        })
    }

    fn check_layout(&self, field: &QuadratureStressField) -> Result<()> {
        if field.len() != self.num_quadrature_points() {
            return Err(Error::DimensionMismatch {
                expected: self.num_quadrature_points(),
                got: field.len(),
            });
        }
        Ok(())
    }

    /// `α_l = (P, B_l)`.
    pub fn project(&self, field: &QuadratureStressField) -> Result<Vec<f64>> {
        self.check_layout(field)?;
        Ok(self
            .functions
            .iter()
            .map(|b| inner(&field.stress, b, &self.weights))
            .collect())
    }

    /// `Σ_l α_l B_l` (only the first `coeffs.len()` functions).
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<QuadratureStressField> {
        if coeffs.len() > self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: coeffs.len(),
            });
        }
        let mut stress = vec![[0.0; 4]; self.num_quadrature_points()];
        for (a, b) in coeffs.iter().zip(&self.functions) {
            for (s, bq) in stress.iter_mut().zip(b) {
                for c in 0..4 {
                    s[c] += a * bq[c];
                }
            }
        }
        Ok(QuadratureStressField {
            stress,
            weights: self.weights.clone(),
            total_volume: self.total_volume,
        })
    }

    /// `‖P − Σ (P, B_l) B_l‖` using the first `l` functions.
    pub fn projection_error(&self, field: &QuadratureStressField, l: usize) -> Result<f64> {
        let coeffs = self.project(field)?;
        let approx = self.reconstruct(&coeffs[..l.min(coeffs.len())])?;
        let diff: Vec<[f64; 4]> = field
            .stress
            .iter()
            .zip(&approx.stress)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]])
            .collect();
        Ok(l2_norm(&diff, &self.weights))
    }

    /// Volume averages `|Ω|⁻¹ Σ_q w_q B_{l,q}`.
    pub fn averages(&self) -> Vec<Tensor2> {
        self.functions
            .iter()
            .map(|b| {
                let mut acc = [0.0; 4];
                for (bq, w) in b.iter().zip(self.weights.iter()) {
                    for c in 0..4 {
                        acc[c] += w * bq[c];
                    }
                }
                Tensor2::from_array(acc.map(|v| v / self.total_volume))
            })
            .collect()
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.len() {
            for j in 0..=i {
                let g = inner(&self.functions[i], &self.functions[j], &self.weights);
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }
}

/// Sorted eigenpairs: descending value, ties by ascending index, sign fixed so
/// the largest-magnitude eigenvector entry is positive.
fn sorted_eigen(c: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = c.nrows();
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(col, &(v * sign));
    }
    (values, vectors)
}

pub fn compute_basis(set: &SnapshotSet, selector: BasisSelector) -> Result<PodBasis> {
    let c = correlation_matrix(set)?;
    let n = set.len();
    if let Some(l) = selector.count {
        if l == 0 || l > n {
            return Err(Error::InvalidInput(format!(
                "basis size {l} must lie in 1..={n}"
            )));
        }
    }
    if let Some(e) = selector.energy {
        if !(e > 0.0 && e <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "energy fraction {e} must lie in (0, 1]"
            )));
        }
    }
    let (values, vectors) = sorted_eigen(c);
    let lambda1 = values[0];
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::DegenerateData("all snapshots are zero".into()));
    }
    let valid = values
        .iter()
        .take_while(|&&v| v >= RELATIVE_CUTOFF * lambda1)
        .count();
    let total: f64 = values.iter().sum();
    let l = match (selector.count, selector.energy) {
        (Some(l), _) => l,
        (None, Some(e)) => {
            let mut acc = 0.0;
            let mut l = n;
            for (k, v) in values.iter().enumerate() {
                acc += v;
                if acc / total > e {
                    l = k + 1;
                    break;
                }
            }
            l
        }
        (None, None) => valid,
    }
    .min(valid);

    let w = set.weights();
    let n_qp = set.num_quadrature_points();
    let mut functions: Vec<Vec<[f64; 4]>> = (0..l)
        .into_par_iter()
        .map(|k| {
            let scale = 1.0 / values[k].sqrt();
            let mut b = vec![[0.0; 4]; n_qp];
            for (i, f) in set.fields.iter().enumerate() {
                let coef = vectors[(i, k)] * scale;
                for (bq, p) in b.iter_mut().zip(&f.stress) {
                    for c in 0..4 {
                        bq[c] += coef * p[c];
                    }
                }
            }
            b
        })
        .collect();
    // the weak modes lose orthogonality to rounding; two passes of weighted
    // Gram-Schmidt restore it without changing the spanned spaces
    for _ in 0..2 {
        for k in 0..l {
            let (done, rest) = functions.split_at_mut(k);
            let bk = &mut rest[0];
            for bj in done.iter() {
                let proj = inner(bk, bj, w);
                for (x, y) in bk.iter_mut().zip(bj) {
                    for c in 0..4 {
                        x[c] -= proj * y[c];
                    }
                }
            }
            let norm = l2_norm(bk, w);
            for x in bk.iter_mut() {
                for c in x.iter_mut() {
                    *c /= norm;
                }
            }
        }
    }
    Ok(PodBasis {
        functions,
        energy_captured: values[..l].iter().sum::<f64>() / total,
        eigenvalues: values,
        weights: w.clone(),
        total_volume: set.total_volume(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snapshot::ParameterPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, n_qp: usize, seed: u64) -> SnapshotSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Arc<[f64]> = (0..n_qp)
            .map(|_| rng.random_range(0.5..1.5))
            .collect::<Vec<_>>()
            .into();
        let fields = (0..n)
            .map(|_| QuadratureStressField {
                stress: (0..n_qp)
                    .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                    .collect(),
                weights: weights.clone(),
                total_volume: weights.iter().sum(),
            })
            .collect();
        let params = (0..n)
            .map(|i| ParameterPoint::new([1.0 + i as f64 * 0.01, 1.0, 0.0], vec![]))
            .collect();
        SnapshotSet {
            params,
            fields,
            mesh_hash: [0; 32],
            settings_hash: [0; 32],
        }
    }

    #[test]
    fn correlation_matches_double_loop() {
        let set = random_set(3, 7, 1);
        let c = correlation_matrix(&set).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut brute = 0.0;
                for q in 0..7 {
                    for k in 0..4 {
                        brute += set.weights()[q]
                            * set.fields[i].stress[q][k]
                            * set.fields[j].stress[q][k];
                    }
                }
                assert!((c[(i, j)] - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_snapshot_basis_is_normalized_field() {
        let set = random_set(1, 5, 2);
        let c = correlation_matrix(&set).unwrap();
        let norm2 = inner(&set.fields[0].stress, &set.fields[0].stress, set.weights());
        assert!((c[(0, 0)] - norm2).abs() < 1e-14);
        let b = compute_basis(&set, BasisSelector::default()).unwrap();
        assert_eq!(b.len(), 1);
        for (x, p) in b.functions[0].iter().zip(&set.fields[0].stress) {
            for k in 0..4 {
                assert!((x[k] - p[k] / norm2.sqrt()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn duplicated_snapshot_is_rank_one() {
        let mut set = random_set(1, 5, 3);
        set.fields.push(set.fields[0].clone());
        set.params
            .push(ParameterPoint::new([1.1, 1.0, 0.0], vec![]));
        let c = correlation_matrix(&set).unwrap();
        assert_eq!(c[(0, 1)], c[(0, 0)]);
        let b = compute_basis(&set, BasisSelector::count(2)).unwrap();
        assert_eq!(b.len(), 1);
        assert!(b.eigenvalues[1] < RELATIVE_CUTOFF * b.eigenvalues[0]);
    }

    #[test]
    fn zero_snapshots_are_degenerate() {
        let mut set = random_set(2, 4, 4);
        for f in &mut set.fields {
            f.stress.iter_mut().for_each(|s| *s = [0.0; 4]);
        }
        assert!(matches!(
            compute_basis(&set, BasisSelector::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn basis_properties() {
        let set = random_set(12, 40, 5);
        let basis = compute_basis(&set, BasisSelector::default()).unwrap();
        assert_eq!(basis.len(), 12);
        assert!(basis.orthonormality_error() < 1e-10);
        assert!(basis.eigenvalues.windows(2).all(|p| p[0] >= p[1]));
        let trace: f64 = (0..12)
            .map(|i| inner(&set.fields[i].stress, &set.fields[i].stress, set.weights()))
            .sum();
        let sum: f64 = basis.eigenvalues.iter().sum();
        assert!((sum - trace).abs() < 1e-10 * trace);
        // projecting a basis function gives a unit vector
        let field = QuadratureStressField {
            stress: basis.functions[3].clone(),
            weights: basis.weights.clone(),
            total_volume: basis.total_volume,
        };
        let a = basis.project(&field).unwrap();
        for (k, v) in a.iter().enumerate() {
            assert!((v - if k == 3 { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
        // Parseval and monotone projection error
        let f0 = &set.fields[0];
        let a = basis.project(f0).unwrap();
        let norm2 = inner(&f0.stress, &f0.stress, set.weights());
        let mut prev = f64::INFINITY;
        for l in 1..=12 {
            let e = basis.projection_error(f0, l).unwrap();
            let parseval = (norm2 - a[..l].iter().map(|x| x * x).sum::<f64>())
                .max(0.0)
                .sqrt();
            assert!((e - parseval).abs() < 1e-7 * norm2.sqrt());
            assert!(e <= prev + 1e-12);
            prev = e;
        }
        assert!(prev < 1e-10 * norm2.sqrt());
    }

    #[test]
    fn selectors() {
        let set = random_set(10, 30, 6);
        let all = compute_basis(&set, BasisSelector::default()).unwrap();
        let total: f64 = all.eigenvalues.iter().sum();
        let target = (all.eigenvalues[0] + all.eigenvalues[1]) / total;
        let b = compute_basis(&set, BasisSelector::energy(target - 1e-9)).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.energy_captured > target - 1e-9);
        let both = BasisSelector {
            count: Some(4),
            energy: Some(0.1),
        };
        assert_eq!(compute_basis(&set, both).unwrap().len(), 4);
        assert!(compute_basis(&set, BasisSelector::count(11)).is_err());
        assert!(compute_basis(&set, BasisSelector::count(0)).is_err());
        assert_eq!(all.truncated(3).unwrap().functions[..], all.functions[..3]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let set = random_set(3, 6, 7);
        let basis = compute_basis(&set, BasisSelector::default()).unwrap();
        let other = random_set(1, 5, 8);
        assert!(matches!(
            basis.project(&other.fields[0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let zero = QuadratureStressField {
            stress: vec![[0.0; 4]; 6],
            ..set.fields[0].clone()
        };
        assert!(basis.project(&zero).unwrap().iter().all(|&a| a == 0.0));
    }
}
