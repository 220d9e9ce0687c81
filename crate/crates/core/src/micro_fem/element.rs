//! Isoparametric quadrilateral shape functions and 2×2 Gauss quadrature.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    /// Bilinear 4-node quadrilateral, full 2×2 integration.
    Quad4,
    /// 8-node serendipity quadrilateral, reduced 2×2 integration.
    Quad8,
}

const G: f64 = 0.577_350_269_189_625_8;

/// Gauss points `(ξ, η, weight)` of the 2×2 rule, counter-clockwise.
pub const GAUSS_2X2: [(f64, f64, f64); 4] =
    [(-G, -G, 1.0), (G, -G, 1.0), (G, G, 1.0), (-G, G, 1.0)];

const CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
const MIDSIDES: [(f64, f64); 4] = [(0.0, -1.0), (1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)];

impl ElementKind {
    pub fn nodes_per_element(self) -> usize {
        match self {
            ElementKind::Quad4 => 4,
            ElementKind::Quad8 => 8,
        }
    }

    /// Node ids along each of the four edges, `[start, end]` plus the
    /// midside node for quad8.
    pub fn edge_local_nodes(self, edge: usize) -> Vec<usize> {
        let (a, b) = (edge, (edge + 1) % 4);
        match self {
            ElementKind::Quad4 => vec![a, b],
            ElementKind::Quad8 => vec![a, b, 4 + edge],
        }
    }

    /// Shape function values and reference gradients `(∂N/∂ξ, ∂N/∂η)`.
    pub fn shape(self, xi: f64, eta: f64, n: &mut [f64], dn: &mut [[f64; 2]]) {
        match self {
            ElementKind::Quad4 => {
                for (a, &(xa, ea)) in CORNERS.iter().enumerate() {
                    n[a] = 0.25 * (1.0 + xi * xa) * (1.0 + eta * ea);
                    dn[a] = [0.25 * xa * (1.0 + eta * ea), 0.25 * ea * (1.0 + xi * xa)];
                }
            }
            ElementKind::Quad8 => {
                for (a, &(xa, ea)) in CORNERS.iter().enumerate() {
                    let (p, q) = (1.0 + xi * xa, 1.0 + eta * ea);
                    let r = xi * xa + eta * ea - 1.0;
                    n[a] = 0.25 * p * q * r;
                    dn[a] = [0.25 * xa * q * (r + p), 0.25 * ea * p * (r + q)];
                }
                for (m, &(xa, ea)) in MIDSIDES.iter().enumerate() {
                    let a = 4 + m;
                    if xa == 0.0 {
                        n[a] = 0.5 * (1.0 - xi * xi) * (1.0 + eta * ea);
                        dn[a] = [-xi * (1.0 + eta * ea), 0.5 * ea * (1.0 - xi * xi)];
                    } else {
                        n[a] = 0.5 * (1.0 + xi * xa) * (1.0 - eta * eta);
                        dn[a] = [0.5 * xa * (1.0 - eta * eta), -eta * (1.0 + xi * xa)];
                    }
                }
            }
        }
    }

    /// 1D shape functions along an edge parametrised by `s ∈ [-1, 1]`, in the
    /// node order of [`edge_local_nodes`](Self::edge_local_nodes).
    pub fn edge_shape(self, s: f64) -> Vec<(f64, f64)> {
        match self {
            ElementKind::Quad4 => vec![(0.5 * (1.0 - s), -0.5), (0.5 * (1.0 + s), 0.5)],
            ElementKind::Quad8 => vec![
                (0.5 * s * (s - 1.0), s - 0.5),
                (0.5 * s * (s + 1.0), s + 0.5),
                (1.0 - s * s, -2.0 * s),
            ],
        }
    }
}

/// Reference-configuration data of one quadrature point.
#[derive(Clone, Debug)]
pub struct QuadPoint {
    /// Spatial gradients `∂N_a/∂X` of the element's shape functions.
    pub grad: Vec<[f64; 2]>,
    /// Shape function values.
    pub n: Vec<f64>,
    /// Gauss weight times the reference Jacobian determinant.
    pub weight: f64,
    /// Reference position of the point.
    pub x: [f64; 2],
}

/// Evaluates the reference quadrature data of one element, failing if the
/// Jacobian is not positive at some Gauss point.
pub fn element_quadrature(kind: ElementKind, coords: &[[f64; 2]]) -> Result<Vec<QuadPoint>, f64> {
    let nn = kind.nodes_per_element();
    let mut n = vec![0.0; nn];
    let mut dn = vec![[0.0; 2]; nn];
    let mut out = Vec::with_capacity(4);
    for &(xi, eta, w) in GAUSS_2X2.iter() {
        kind.shape(xi, eta, &mut n, &mut dn);
        let mut j = [[0.0; 2]; 2];
        let mut x = [0.0; 2];
        for a in 0..nn {
            for r in 0..2 {
                x[r] += n[a] * coords[a][r];
                for c in 0..2 {
                    j[r][c] += coords[a][r] * dn[a][c];
                }
            }
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !(det > 0.0) {
            return Err(det);
        }
        let inv = [
            [j[1][1] / det, -j[0][1] / det],
            [-j[1][0] / det, j[0][0] / det],
        ];
        let grad = dn
            .iter()
            .map(|d| {
                [
                    d[0] * inv[0][0] + d[1] * inv[1][0],
                    d[0] * inv[0][1] + d[1] * inv[1][1],
                ]
            })
            .collect();
        out.push(QuadPoint {
            grad,
            n: n.clone(),
            weight: w * det,
            x,
        });
    }
    Ok(out)
}
