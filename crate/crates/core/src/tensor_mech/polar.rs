use super::Tensor2;
use crate::error::{Error, Result};

/// Polar decomposition `F = R·U` of a 2×2 tensor with positive determinant.
///
/// In 2D the rotation angle has the closed form
/// `θ = atan2(F₂₁ − F₁₂, F₁₁ + F₂₂)`, because `F₁₁ + F₂₂ = cos θ · tr U`,
/// `F₂₁ − F₁₂ = sin θ · tr U` and `tr U > 0`. Then `U = Rᵀ F`.
pub fn polar_stretch(f: &Tensor2) -> Result<(Tensor2, Tensor2)> {
    let det = f.det();
    if !(det > 0.0 && det.is_finite()) {
        return Err(Error::InvertedElement { det });
    }
    let theta = (f[(1, 0)] - f[(0, 1)]).atan2(f[(0, 0)] + f[(1, 1)]);
    let r = Tensor2::rotation(theta);
    let u = r.transpose() * *f;
    let off = 0.5 * (u[(0, 1)] + u[(1, 0)]);
    let u = Tensor2::new(u[(0, 0)], off, off, u[(1, 1)]);
    Ok((r, u))
}

/// Gradient `∂θ/∂F` of the polar rotation angle.
pub fn polar_angle_gradient(f: &Tensor2) -> Tensor2 {
    let c = f[(0, 0)] + f[(1, 1)];
    let s = f[(1, 0)] - f[(0, 1)];
    let n2 = c * c + s * s;
    Tensor2::new(-s / n2, -c / n2, c / n2, -s / n2)
}
