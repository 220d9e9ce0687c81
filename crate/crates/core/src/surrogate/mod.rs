//! Stress-field surrogate: POD basis plus one Gaussian process per
//! coefficient, with effective stress, consistent tangent and rotation
//! handling.

mod archive;

pub use archive::{load_model, load_model_for_mesh, save_model};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpr::{GprModel, GprOptions};
use crate::micro_fem::{average_stress, QuadratureStressField};
use crate::pod::{compute_basis, l2_norm, BasisSelector, PodBasis};
use crate::snapshot::{ParameterPoint, SnapshotSet};
use crate::tensor_mech::{polar_angle_gradient, polar_stretch, Tensor2, Tensor4};

/// Inputs leaving the training box by more than this fraction of its width
/// are flagged as extrapolation.
pub const EXTRAPOLATION_MARGIN: f64 = 0.1;

/// Ordering and training box of the regression inputs
/// `(U11, U22, U12, material…)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamLayout {
    pub fn from_points(points: &[ParameterPoint]) -> Result<Self> {
        let d = points
            .first()
            .map(|p| p.dim())
            .ok_or_else(|| Error::InvalidInput("no parameter points".into()))?;
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for p in points {
            for (k, v) in p.values().into_iter().enumerate() {
                lower[k] = lower[k].min(v);
                upper[k] = upper[k].max(v);
            }
        }
        let mut names: Vec<String> = ["U11", "U22", "U12"].map(String::from).to_vec();
        names.extend((0..d - 3).map(|k| format!("mu{k}")));
        Ok(ParamLayout {
            names,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn num_material(&self) -> usize {
        self.dim() - 3
    }

    /// True if any coordinate lies outside the box widened by the margin.
    pub fn is_extrapolation(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .any(|((v, lo), hi)| {
                let span = hi - lo;
                if span > 0.0 {
                    let t = (v - lo) / span;
                    !(-EXTRAPOLATION_MARGIN..=1.0 + EXTRAPOLATION_MARGIN).contains(&t)
                } else {
                    (v - lo).abs() > EXTRAPOLATION_MARGIN * lo.abs().max(1e-12)
                }
            })
    }

    /// Regression input for a symmetric stretch and material parameters.
    pub fn input(&self, u_bar: &Tensor2, mu: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != self.num_material() {
            return Err(Error::DimensionMismatch {
                expected: self.num_material(),
                got: mu.len(),
            });
        }
        let asym = (u_bar[(0, 1)] - u_bar[(1, 0)]).abs();
        if asym > 1e-10 * u_bar.norm().max(1.0) {
            return Err(Error::InvalidInput(format!(
                "stretch is not symmetric (|U12 - U21| = {asym:e})"
            )));
        }
        let u12 = 0.5 * (u_bar[(0, 1)] + u_bar[(1, 0)]);
        if !(u_bar[(0, 0)] > 0.0 && u_bar[(0, 0)] * u_bar[(1, 1)] - u12 * u12 > 0.0) {
            return Err(Error::InvalidInput(
                "stretch is not positive definite".into(),
            ));
        }
        let mut x = vec![u_bar[(0, 0)], u_bar[(1, 1)], u12];
        x.extend_from_slice(mu);
        Ok(x)
    }
}

/// A prediction and whether its input left the training box.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub value: T,
    pub extrapolated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateModel {
    pub basis: PodBasis,
    pub regressors: Vec<GprModel>,
    pub layout: ParamLayout,
    /// `|Ω|⁻¹ Σ_q w_q B_{l,q}` per basis function.
    pub averages: Vec<Tensor2>,
    pub mesh_hash: [u8; 32],
    pub settings_hash: [u8; 32],
}

/// Fits one regression per POD coefficient. The per-coefficient fits run on
/// the current rayon pool; each fit is sequential, so the result does not
/// depend on the pool size.
pub fn train(
    set: &SnapshotSet,
    selector: BasisSelector,
    gpr: &GprOptions,
) -> Result<SurrogateModel> {
    train_split(set, set, selector, gpr)
}

/// Builds the basis from `basis_set` and fits the regressors on the
/// projections of `regression_set`. Both sets must share one mesh.
pub fn train_split(
    basis_set: &SnapshotSet,
    regression_set: &SnapshotSet,
    selector: BasisSelector,
    gpr: &GprOptions,
) -> Result<SurrogateModel> {
    basis_set.validate()?;
    regression_set.validate()?;
    if regression_set.len() < 2 {
        return Err(Error::InvalidInput(
            "training needs at least two snapshots".into(),
        ));
    }
    if basis_set.mesh_hash != regression_set.mesh_hash {
        return Err(Error::MeshMismatch {
            expected: crate::micro_fem::to_hex(&basis_set.mesh_hash),
            found: crate::micro_fem::to_hex(&regression_set.mesh_hash),
        });
    }
    let basis = compute_basis(basis_set, selector)?;
    let coeffs: Vec<Vec<f64>> = regression_set
        .fields
        .par_iter()
        .map(|f| basis.project(f))
        .collect::<Result<_>>()?;
    let inputs: Vec<Vec<f64>> = regression_set.params.iter().map(|p| p.values()).collect();
    let regressors = (0..basis.len())
        .into_par_iter()
        .map(|l| {
            let y: Vec<f64> = coeffs.iter().map(|c| c[l]).collect();
            GprModel::fit(&inputs, &y, gpr).map_err(|e| match e {
                Error::FitFailed(m) => Error::FitFailed(format!("coefficient {l}: {m}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let averages = basis.averages();
    Ok(SurrogateModel {
        layout: ParamLayout::from_points(&regression_set.params)?,
        basis,
        regressors,
        averages,
        mesh_hash: regression_set.mesh_hash,
        settings_hash: regression_set.settings_hash,
    })
}

impl SurrogateModel {
    pub fn len(&self) -> usize {
        self.regressors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regressors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.regressors.len() != self.basis.len() || self.averages.len() != self.basis.len() {
            return Err(Error::InvalidInput(format!(
                "{} regressors and {} averages for {} basis functions",
                self.regressors.len(),
                self.averages.len(),
                self.basis.len()
            )));
        }
        if let Some(r) = self
            .regressors
            .iter()
            .find(|r| r.dim() != self.layout.dim())
        {
            return Err(Error::DimensionMismatch {
                expected: self.layout.dim(),
                got: r.dim(),
            });
        }
        Ok(())
    }

    /// The model restricted to its first `l` coefficients.
    pub fn truncated(&self, l: usize) -> Result<SurrogateModel> {
        Ok(SurrogateModel {
            basis: self.basis.truncated(l)?,
            regressors: self.regressors[..l].to_vec(),
            layout: self.layout.clone(),
            averages: self.averages[..l].to_vec(),
            mesh_hash: self.mesh_hash,
            settings_hash: self.settings_hash,
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<bool> {
        if x.len() != self.layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(self.layout.is_extrapolation(x))
    }

    /// Regressed POD coefficients at a raw input vector.
    pub fn coefficients(&self, x: &[f64]) -> Result<Prediction<Vec<f64>>> {
        let extrapolated = self.check_input(x)?;
        Ok(Prediction {
            value: self
                .regressors
                .iter()
                .map(|r| r.mean_unchecked(x))
                .collect(),
            extrapolated,
        })
    }

    pub fn stress_field(
        &self,
        u_bar: &Tensor2,
        mu: &[f64],
    ) -> Result<Prediction<QuadratureStressField>> {
        self.stress_field_at(&self.layout.input(u_bar, mu)?)
    }

    pub fn stress_field_at(&self, x: &[f64]) -> Result<Prediction<QuadratureStressField>> {
        let c = self.coefficients(x)?;
        Ok(Prediction {
            value: self.basis.reconstruct(&c.value)?,
            extrapolated: c.extrapolated,
        })
    }

    /// Microscopic field for a general deformation: `R·P̂_q(U)` at each point.
    pub fn rotated_stress_field(
        &self,
        f_bar: &Tensor2,
        mu: &[f64],
    ) -> Result<Prediction<QuadratureStressField>> {
        let (r, u) = polar_stretch(f_bar)?;
        let mut p = self.stress_field(&u, mu)?;
        for s in &mut p.value.stress {
            *s = (r * Tensor2::from_array(*s)).to_array();
        }
        Ok(p)
    }

    pub fn effective_stress(&self, u_bar: &Tensor2, mu: &[f64]) -> Result<Prediction<Tensor2>> {
        self.effective_stress_at(&self.layout.input(u_bar, mu)?)
    }

    pub fn effective_stress_at(&self, x: &[f64]) -> Result<Prediction<Tensor2>> {
        let c = self.coefficients(x)?;
        Ok(Prediction {
            value: self.combine(&c.value),
            extrapolated: c.extrapolated,
        })
    }

    fn combine(&self, coeffs: &[f64]) -> Tensor2 {
        coeffs
            .iter()
            .zip(&self.averages)
            .fold(Tensor2::zeros(), |acc, (a, b)| acc + *b * *a)
    }

    /// `P̄(a) − P̄(b)` without cancellation between the two evaluations.
    pub fn effective_stress_difference(&self, a: &[f64], b: &[f64]) -> Result<Tensor2> {
        self.check_input(a)?;
        self.check_input(b)?;
        let d: Vec<f64> = self
            .regressors
            .iter()
            .map(|r| r.mean_difference(a, b))
            .collect::<Result<_>>()?;
        Ok(self.combine(&d))
    }

    /// `∂P̄/∂x_k` for every input coordinate, material parameters included.
    pub fn effective_stress_gradient(&self, x: &[f64]) -> Result<Prediction<Vec<Tensor2>>> {
        let extrapolated = self.check_input(x)?;
        let mut grads = vec![Tensor2::zeros(); x.len()];
        for (r, avg) in self.regressors.iter().zip(&self.averages) {
            for (g, dk) in grads.iter_mut().zip(r.gradient_unchecked(x)) {
                *g += *avg * dk;
            }
        }
        Ok(Prediction {
            value: grads,
            extrapolated,
        })
    }

    /// `∂P̄/∂F̄` at `F̄ = Ū`, splitting the shear derivative evenly between
    /// `F̄₁₂` and `F̄₂₁`.
    pub fn effective_stiffness(&self, u_bar: &Tensor2, mu: &[f64]) -> Result<Prediction<Tensor4>> {
        let g = self.effective_stress_gradient(&self.layout.input(u_bar, mu)?)?;
        Ok(Prediction {
            value: stiffness_from_gradient(&g.value),
            extrapolated: g.extrapolated,
        })
    }

    /// Stress and tangent for a general deformation gradient, rotating the
    /// stretch-based prediction and differentiating through the polar
    /// decomposition.
    pub fn constitutive_eval(
        &self,
        f_bar: &Tensor2,
        mu: &[f64],
    ) -> Result<Prediction<(Tensor2, Tensor4)>> {
        let (r, u) = polar_stretch(f_bar)?;
        let x = self.layout.input(&u, mu)?;
        let p = self.effective_stress_at(&x)?;
        let g = self.effective_stress_gradient(&x)?;
        let stress_u = p.value;
        let (d11, d22, d12) = (g.value[0], g.value[1], g.value[2]);
        let dtheta = polar_angle_gradient(f_bar);
        let (s, c) = (r[(1, 0)], r[(0, 0)]);
        let dr = Tensor2::new(-s, -c, c, -s);
        let rot_part = dr.transpose() * *f_bar;
        let mut a = Tensor4::zeros();
        for k in 0..2 {
            for l in 0..2 {
                let dt = dtheta[(k, l)];
                let du = rot_part * dt + r.transpose() * Tensor2::unit(k, l);
                let dp_u =
                    d11 * du[(0, 0)] + d22 * du[(1, 1)] + d12 * (0.5 * (du[(0, 1)] + du[(1, 0)]));
                a.set_column(k, l, &(dr * stress_u * dt + r * dp_u));
            }
        }
        Ok(Prediction {
            value: (r * stress_u, a),
            extrapolated: p.extrapolated,
        })
    }

    /// Projection, regression and total error for one high-fidelity field.
    pub fn error_decomposition(
        &self,
        field: &QuadratureStressField,
        params: &ParameterPoint,
    ) -> Result<SnapshotError> {
        if field.len() != self.basis.num_quadrature_points() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.num_quadrature_points(),
                got: field.len(),
            });
        }
        let x = params.values();
        let exact = self.basis.project(field)?;
        let predicted = self.coefficients(&x)?.value;
        let projected = self.basis.reconstruct(&exact)?;
        let surrogate = self.basis.reconstruct(&predicted)?;
        let w = &self.basis.weights;
        let diff = |a: &[[f64; 4]], b: &[[f64; 4]]| -> Vec<[f64; 4]> {
            a.iter()
                .zip(b)
                .map(|(p, q)| [p[0] - q[0], p[1] - q[1], p[2] - q[2], p[3] - q[3]])
                .collect()
        };
        let truth = average_stress(field);
        let rel = |p: Tensor2| (p - truth).norm() / truth.norm();
        Ok(SnapshotError {
            params: params.clone(),
            total: l2_norm(&diff(&field.stress, &surrogate.stress), w),
            projection: l2_norm(&diff(&field.stress, &projected.stress), w),
            regression: exact
                .iter()
                .zip(&predicted)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            field_norm: l2_norm(&field.stress, w),
            stress_error: rel(self.combine(&predicted)),
            projected_stress_error: rel(self.combine(&exact)),
        })
    }

    /// Error decomposition over a whole test set.
    pub fn evaluate(&self, set: &SnapshotSet) -> Result<ErrorReport> {
        let per: Vec<SnapshotError> = set
            .fields
            .par_iter()
            .zip(&set.params)
            .map(|(f, p)| self.error_decomposition(f, p))
            .collect::<Result<_>>()?;
        Ok(ErrorReport::new(per))
    }
}

/// Expands `∂P̄/∂(U11, U22, U12)` to a tangent with the symmetric shear rule.
fn stiffness_from_gradient(g: &[Tensor2]) -> Tensor4 {
    let mut a = Tensor4::zeros();
    a.set_column(0, 0, &g[0]);
    a.set_column(1, 1, &g[1]);
    let half = g[2] * 0.5;
    a.set_column(0, 1, &half);
    a.set_column(1, 0, &half);
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotError {
    pub params: ParameterPoint,
    /// `‖P − P̂‖` in L².
    pub total: f64,
    /// `‖P − Σ (P, B_l) B_l‖` in L².
    pub projection: f64,
    /// `‖α − α̂‖₂`.
    pub regression: f64,
    pub field_norm: f64,
    /// Relative Frobenius error of the surrogate effective stress.
    pub stress_error: f64,
    /// Same for the average of the projected field.
    pub projected_stress_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Means over the test set.
    pub total: f64,
    pub projection: f64,
    pub regression: f64,
    pub per_snapshot: Vec<SnapshotError>,
}

impl ErrorReport {
    pub fn new(per_snapshot: Vec<SnapshotError>) -> Self {
        let n = per_snapshot.len().max(1) as f64;
        let mean = |f: fn(&SnapshotError) -> f64| per_snapshot.iter().map(f).sum::<f64>() / n;
        ErrorReport {
            total: mean(|e| e.total),
            projection: mean(|e| e.projection),
            regression: mean(|e| e.regression),
            per_snapshot,
        }
    }

    pub fn mean_stress_error(&self) -> f64 {
        self.per_snapshot
            .iter()
            .map(|e| e.stress_error)
            .sum::<f64>()
            / self.per_snapshot.len().max(1) as f64
    }

    pub fn max_stress_error(&self) -> f64 {
        self.per_snapshot
            .iter()
            .map(|e| e.stress_error)
            .fold(0.0, f64::max)
    }

    pub fn mean_projected_stress_error(&self) -> f64 {
        self.per_snapshot
            .iter()
            .map(|e| e.projected_stress_error)
            .sum::<f64>()
            / self.per_snapshot.len().max(1) as f64
    }

    pub fn max_projected_stress_error(&self) -> f64 {
        self.per_snapshot
            .iter()
            .map(|e| e.projected_stress_error)
            .fold(0.0, f64::max)
    }
}
