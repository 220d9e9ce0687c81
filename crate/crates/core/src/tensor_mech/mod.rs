//! Tensor algebra and the compressible Neo-Hookean law in plane strain.
//!
//! All 2D tensors are the in-plane block of a 3D tensor with `F₃₃ = 1` and
//! vanishing out-of-plane shear, so `Tr(C) = Tr(FᵀF) + 1` and `J = det F`.

mod polar;
mod tensor;

pub use polar::{polar_angle_gradient, polar_stretch};
pub use tensor::{Tensor2, Tensor4};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neo-Hookean constants `(C₁, D₁)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub c1: f64,
    pub d1: f64,
}

impl MaterialParams {
    pub fn new(c1: f64, d1: f64) -> Result<Self> {
        if !(c1 > 0.0 && d1 > 0.0 && c1.is_finite() && d1.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "material constants must be positive, got c1={c1}, d1={d1}"
            )));
        }
        Ok(MaterialParams { c1, d1 })
    }
}

fn checked_det(f: &Tensor2) -> Result<f64> {
    let det = f.det();
    if det > 0.0 && det.is_finite() {
        Ok(det)
    } else {
        Err(Error::InvertedElement { det })
    }
}

/// `W = C₁(Tr C − 3 − 2 ln J) + D₁(J − 1)²`.
pub fn strain_energy(f: &Tensor2, mu: &MaterialParams) -> Result<f64> {
    let j = checked_det(f)?;
    let tr_c = f.0.norm_squared() + 1.0;
    Ok(mu.c1 * (tr_c - 3.0 - 2.0 * j.ln()) + mu.d1 * (j - 1.0) * (j - 1.0))
}

/// First Piola–Kirchhoff stress `P = ∂W/∂F`.
pub fn pk1_stress(f: &Tensor2, mu: &MaterialParams) -> Result<Tensor2> {
    let j = checked_det(f)?;
    let f_inv_t = f.inverse().expect("det checked").transpose();
    Ok(2.0 * mu.c1 * (*f - f_inv_t) + (2.0 * mu.d1 * j * (j - 1.0)) * f_inv_t)
}

/// Material tangent `A = ∂P/∂F` in closed form.
pub fn material_tangent(f: &Tensor2, mu: &MaterialParams) -> Result<Tensor4> {
    Ok(stress_and_tangent(f, mu)?.1)
}

/// Stress and tangent sharing one inversion; this is the assembly hot path.
///
/// `A_ijkl = 2C₁ δ_ik δ_jl + (2C₁ − 2D₁J(J−1)) G_il G_kj + 2D₁J(2J−1) G_ij G_kl`
/// with `G = F⁻ᵀ`.
pub fn stress_and_tangent(f: &Tensor2, mu: &MaterialParams) -> Result<(Tensor2, Tensor4)> {
    let j = checked_det(f)?;
    let g = f.inverse().expect("det checked").transpose();
    let vol = 2.0 * mu.d1 * j * (j - 1.0);
    let p = 2.0 * mu.c1 * (*f - g) + vol * g;

    let c_geo = 2.0 * mu.c1 - vol;
    let c_vol = 2.0 * mu.d1 * j * (2.0 * j - 1.0);
    let a = Tensor4::from_fn(|i, jj, k, l| {
        let iso = if i == k && jj == l { 2.0 * mu.c1 } else { 0.0 };
        iso + c_geo * g[(i, l)] * g[(k, jj)] + c_vol * g[(i, jj)] * g[(k, l)]
    });
    Ok((p, a))
}

/// Young's modulus and Poisson ratio `(E, ν)` of the linearized law.
pub fn elastic_constants(mu: &MaterialParams) -> (f64, f64) {
    let (c1, d1) = (mu.c1, mu.d1);
    let e = 2.0 * c1 * (3.0 * d1 + 2.0 * c1) / (c1 + d1);
    let nu = d1 / (2.0 * (c1 + d1));
    (e, nu)
}
