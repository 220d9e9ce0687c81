//! Block-structured generators for the preset geometries.
//!
//! Every RVE preset lives on the unit cell `[0,1]²` and is geometrically
//! periodic: opposite edges carry identical node distributions, so the
//! periodic pairing is exact.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micro_fem::{ElementKind, Mesh, PeriodicPairs};

/// A circular inclusion or pore.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum MeshSpec {
    /// `n × n` bilinear elements on the unit square.
    UnitSquare { n: usize },
    /// Unit cell split into 2×2 sub-cells, each holding one circular pore.
    /// Elements are quad4.
    Porous {
        pores: [Circle; 4],
        /// Elements per sub-cell side along the pore.
        tangential: usize,
        /// Elements between the pore and the sub-cell edge.
        radial: usize,
    },
    /// Unit cell with one centred circular fiber (phase 1) in a matrix
    /// (phase 0). Elements are quad8.
    Fiber {
        radius: f64,
        /// Elements per cell side (also per side of the fiber core).
        tangential: usize,
        /// Radial elements in the fiber ring.
        fiber_radial: usize,
        /// Radial elements in the matrix.
        matrix_radial: usize,
    },
    /// Cook's membrane, `2n × n` bilinear elements.
    Cook { n: usize },
}

/// Pore area fraction of the porous preset.
pub const POROUS_AREA_FRACTION: f64 = 0.14;
/// Fiber area fraction of the fiber preset.
pub const FIBER_AREA_FRACTION: f64 = 0.1256;

impl MeshSpec {
    /// Four pores in a staggered 2×2 layout, two large and two small,
    /// totalling 14% of the cell. `refine` scales the resolution.
    pub fn porous(refine: usize) -> Self {
        let big: f64 = 0.12;
        let small = (POROUS_AREA_FRACTION / (2.0 * PI) - big * big).sqrt();
        let s = 0.03;
        MeshSpec::Porous {
            pores: [
                Circle {
                    center: [0.25 + s, 0.25],
                    radius: big,
                },
                Circle {
                    center: [0.75, 0.25 + s],
                    radius: small,
                },
                Circle {
                    center: [0.25, 0.75 - s],
                    radius: small,
                },
                Circle {
                    center: [0.75 - s, 0.75],
                    radius: big,
                },
            ],
            tangential: 10 * refine.max(1),
            radial: 9 * refine.max(1),
        }
    }

    /// Centred fiber with 12.56% area fraction. `refine` scales the resolution.
    pub fn fiber(refine: usize) -> Self {
        let r = refine.max(1);
        MeshSpec::Fiber {
            radius: (FIBER_AREA_FRACTION / PI).sqrt(),
            tangential: 16 * r,
            fiber_radial: 3 * r,
            matrix_radial: 12 * r,
        }
    }

    pub fn build(&self) -> Result<Mesh> {
        let mesh = match *self {
            MeshSpec::UnitSquare { n } => {
                if n == 0 {
                    return Err(Error::InvalidInput("unit_square needs n >= 1".into()));
                }
                let mut b = Builder::new(ElementKind::Quad4);
                b.block(n, n, 0, |s, t| [s, t]);
                b.finish_cell(1.0)
            }
            MeshSpec::Porous {
                pores,
                tangential,
                radial,
            } => build_porous(&pores, tangential, radial)?,
            MeshSpec::Fiber {
                radius,
                tangential,
                fiber_radial,
                matrix_radial,
            } => build_fiber(radius, tangential, fiber_radial, matrix_radial)?,
            MeshSpec::Cook { n } => return build_cook(n),
        };
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Assembles blocks into one conforming mesh, merging coincident nodes.
struct Builder {
    kind: ElementKind,
    nodes: Vec<[f64; 2]>,
    lookup: HashMap<(i64, i64), usize>,
    elements: Vec<Vec<usize>>,
    phases: Vec<usize>,
}

impl Builder {
    fn new(kind: ElementKind) -> Self {
        Builder {
            kind,
            nodes: Vec::new(),
            lookup: HashMap::new(),
            elements: Vec::new(),
            phases: Vec::new(),
        }
    }

    fn node(&mut self, p: [f64; 2]) -> usize {
        let key = ((p[0] * 1e8).round() as i64, (p[1] * 1e8).round() as i64);
        if let Some(&id) = self.lookup.get(&key) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(p);
        self.lookup.insert(key, id);
        id
    }

    /// Adds an `ns × nt` block of the map `(s, t) ∈ [0,1]² → X`. Element
    /// orientation is fixed up to counter-clockwise.
    fn block(&mut self, ns: usize, nt: usize, phase: usize, map: impl Fn(f64, f64) -> [f64; 2]) {
        let sub = match self.kind {
            ElementKind::Quad4 => 1,
            ElementKind::Quad8 => 2,
        };
        let (ms, mt) = (sub * ns, sub * nt);
        let mut grid = vec![vec![usize::MAX; mt + 1]; ms + 1];
        for (i, row) in grid.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                let on_corner_grid = i % sub == 0 || j % sub == 0;
                if on_corner_grid {
                    let p = map(i as f64 / ms as f64, j as f64 / mt as f64);
                    *slot = self.node(p);
                }
            }
        }
        for i in 0..ns {
            for j in 0..nt {
                let (a, b) = (sub * i, sub * j);
                let mut conn = vec![
                    grid[a][b],
                    grid[a + sub][b],
                    grid[a + sub][b + sub],
                    grid[a][b + sub],
                ];
                if self.kind == ElementKind::Quad8 {
                    conn.extend([
                        grid[a + 1][b],
                        grid[a + 2][b + 1],
                        grid[a + 1][b + 2],
                        grid[a][b + 1],
                    ]);
                }
                if signed_area(&self.nodes, &conn) < 0.0 {
                    conn = match self.kind {
                        ElementKind::Quad4 => vec![conn[0], conn[3], conn[2], conn[1]],
                        ElementKind::Quad8 => vec![
                            conn[0], conn[3], conn[2], conn[1], conn[7], conn[6], conn[5], conn[4],
                        ],
                    };
                }
                self.elements.push(conn);
                self.phases.push(phase);
            }
        }
    }

    /// Finalises an RVE on `[0, side]²`: boundary set and periodic pairing.
    fn finish_cell(self, side: f64) -> Mesh {
        let tol = 1e-9 * side;
        let on = |v: f64, target: f64| (v - target).abs() < tol;
        let mut boundary = Vec::new();
        let mut corners = [usize::MAX; 4];
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut bottom = Vec::new();
        let mut top = Vec::new();
        for (id, p) in self.nodes.iter().enumerate() {
            let (l, r, b, t) = (on(p[0], 0.0), on(p[0], side), on(p[1], 0.0), on(p[1], side));
            if !(l || r || b || t) {
                continue;
            }
            boundary.push(id);
            match (l, r, b, t) {
                (true, _, true, _) => corners[0] = id,
                (_, true, true, _) => corners[1] = id,
                (_, true, _, true) => corners[2] = id,
                (true, _, _, true) => corners[3] = id,
                (true, ..) => left.push(id),
                (_, true, ..) => right.push(id),
                (_, _, true, _) => bottom.push(id),
                _ => top.push(id),
            }
        }
        let nodes = &self.nodes;
        let by = |v: &mut Vec<usize>, axis: usize| {
            v.sort_by(|a, b| nodes[*a][axis].partial_cmp(&nodes[*b][axis]).unwrap())
        };
        by(&mut left, 1);
        by(&mut right, 1);
        by(&mut bottom, 0);
        by(&mut top, 0);
        let matched = left.len() == right.len()
            && bottom.len() == top.len()
            && corners.iter().all(|&c| c != usize::MAX)
            && left
                .iter()
                .zip(&right)
                .all(|(a, b)| on(nodes[*a][1], nodes[*b][1]))
            && bottom
                .iter()
                .zip(&top)
                .all(|(a, b)| on(nodes[*a][0], nodes[*b][0]));
        let periodic = matched.then(|| PeriodicPairs {
            pairs: left
                .iter()
                .copied()
                .zip(right.iter().copied())
                .chain(bottom.iter().copied().zip(top.iter().copied()))
                .collect(),
            corners,
        });
        Mesh {
            kind: self.kind,
            nodes: self.nodes,
            elements: self.elements,
            phases: self.phases,
            boundary_nodes: boundary,
            periodic,
            cell_volume: side * side,
        }
    }
}

fn signed_area(nodes: &[[f64; 2]], conn: &[usize]) -> f64 {
    let mut a = 0.0;
    for k in 0..4 {
        let (p, q) = (nodes[conn[k]], nodes[conn[(k + 1) % 4]]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Blends `inner(t)` to `outer(t)` with the radial coordinate graded towards
/// the inner curve.
fn ring_map(
    inner: impl Fn(f64) -> [f64; 2],
    outer: impl Fn(f64) -> [f64; 2],
    grading: f64,
) -> impl Fn(f64, f64) -> [f64; 2] {
    move |s, t| lerp(inner(t), outer(t), s.powf(grading))
}

/// Square `[lo, hi]` side `k` (0 bottom, 1 right, 2 top, 3 left), traversed
/// counter-clockwise.
fn square_side(lo: [f64; 2], hi: [f64; 2], k: usize) -> impl Fn(f64) -> [f64; 2] {
    let c = [
        [lo[0], lo[1]],
        [hi[0], lo[1]],
        [hi[0], hi[1]],
        [lo[0], hi[1]],
    ];
    let (a, b) = (c[k], c[(k + 1) % 4]);
    move |t| lerp(a, b, t)
}

/// Arc of `circle` between the directions of the square corners bounding
/// side `k`, with the angle interpolated linearly.
fn arc_for_side(circle: Circle, lo: [f64; 2], hi: [f64; 2], k: usize) -> (f64, f64) {
    let c = [
        [lo[0], lo[1]],
        [hi[0], lo[1]],
        [hi[0], hi[1]],
        [lo[0], hi[1]],
    ];
    let ang = |p: [f64; 2]| (p[1] - circle.center[1]).atan2(p[0] - circle.center[0]);
    let a0 = ang(c[k]);
    let mut a1 = ang(c[(k + 1) % 4]);
    while a1 < a0 {
        a1 += 2.0 * PI;
    }
    (a0, a1)
}

fn arc_point(center: [f64; 2], radius: f64, a0: f64, a1: f64, t: f64) -> [f64; 2] {
    let a = a0 + t * (a1 - a0);
    [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
}

fn build_porous(pores: &[Circle; 4], tangential: usize, radial: usize) -> Result<Mesh> {
    if tangential == 0 || radial == 0 {
        return Err(Error::InvalidInput(
            "porous preset needs positive resolution".into(),
        ));
    }
    let mut b = Builder::new(ElementKind::Quad4);
    for (idx, pore) in pores.iter().enumerate() {
        let (ci, cj) = ((idx % 2) as f64, (idx / 2) as f64);
        let lo = [0.5 * ci, 0.5 * cj];
        let hi = [lo[0] + 0.5, lo[1] + 0.5];
        let margin = [
            pore.center[0] - lo[0],
            hi[0] - pore.center[0],
            pore.center[1] - lo[1],
            hi[1] - pore.center[1],
        ];
        if margin.iter().any(|&m| m <= 1.05 * pore.radius) {
            return Err(Error::InvalidInput(format!(
                "pore {idx} does not fit inside its sub-cell"
            )));
        }
        let arcs: Vec<(f64, f64)> = (0..4).map(|k| arc_for_side(*pore, lo, hi, k)).collect();
        // the inscribed polygon must enclose the requested pore area
        let poly: f64 = arcs
            .iter()
            .map(|&(a0, a1)| tangential as f64 * 0.5 * ((a1 - a0) / tangential as f64).sin())
            .sum();
        let rho = pore.radius * (PI / poly).sqrt();
        for (k, &(a0, a1)) in arcs.iter().enumerate() {
            let center = pore.center;
            b.block(
                radial,
                tangential,
                0,
                ring_map(
                    move |t| arc_point(center, rho, a0, a1, t),
                    square_side(lo, hi, k),
                    1.3,
                ),
            );
        }
    }
    Ok(b.finish_cell(1.0))
}

fn build_fiber(
    radius: f64,
    tangential: usize,
    fiber_radial: usize,
    matrix_radial: usize,
) -> Result<Mesh> {
    if !(radius > 0.0 && radius < 0.45) {
        return Err(Error::InvalidInput(format!(
            "fiber radius {radius} out of range"
        )));
    }
    if tangential == 0 || fiber_radial == 0 || matrix_radial == 0 {
        return Err(Error::InvalidInput(
            "fiber preset needs positive resolution".into(),
        ));
    }
    let mut b = Builder::new(ElementKind::Quad8);
    let circle = Circle {
        center: [0.5, 0.5],
        radius,
    };
    let core = 0.6 * radius / 2f64.sqrt();
    let (clo, chi) = ([0.5 - core, 0.5 - core], [0.5 + core, 0.5 + core]);
    b.block(tangential, tangential, 1, |s, t| {
        lerp(
            [clo[0], clo[1] + t * (chi[1] - clo[1])],
            [chi[0], clo[1] + t * (chi[1] - clo[1])],
            s,
        )
    });
    for k in 0..4 {
        let (a0, a1) = arc_for_side(circle, [0.0, 0.0], [1.0, 1.0], k);
        b.block(
            fiber_radial,
            tangential,
            1,
            ring_map(
                square_side(clo, chi, k),
                move |t| arc_point([0.5, 0.5], radius, a0, a1, t),
                1.0,
            ),
        );
        b.block(
            matrix_radial,
            tangential,
            0,
            ring_map(
                move |t| arc_point([0.5, 0.5], radius, a0, a1, t),
                square_side([0.0, 0.0], [1.0, 1.0], k),
                1.3,
            ),
        );
    }
    Ok(b.finish_cell(1.0))
}

/// Corners of the tapered Cook membrane, counter-clockwise.
pub const COOK_CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [48.0, 44.0], [48.0, 60.0], [0.0, 44.0]];

fn build_cook(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidInput("cook mesh needs n >= 1".into()));
    }
    let c = COOK_CORNERS;
    let mut b = Builder::new(ElementKind::Quad4);
    b.block(2 * n, n, 0, |s, t| {
        let bottom = lerp(c[0], c[1], s);
        let top = lerp(c[3], c[2], s);
        lerp(bottom, top, t)
    });
    let boundary = b
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let s = p[0] / 48.0;
            let yb = 44.0 * s;
            let yt = 44.0 + 16.0 * s;
            p[0].abs() < 1e-9
                || (p[0] - 48.0).abs() < 1e-9
                || (p[1] - yb).abs() < 1e-9
                || (p[1] - yt).abs() < 1e-9
        })
        .map(|(i, _)| i)
        .collect();
    let mesh = Mesh {
        kind: ElementKind::Quad4,
        nodes: b.nodes,
        elements: b.elements,
        phases: b.phases,
        boundary_nodes: boundary,
        periodic: None,
        cell_volume: 0.5 * 48.0 * (44.0 + 16.0),
    };
    mesh.validate()?;
    Ok(mesh)
}
