use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::element::{element_quadrature, ElementKind, QuadPoint};
use crate::error::{Error, Result};

/// Periodic node pairing of a geometrically periodic cell.
///
/// `pairs` holds `(master, slave)` couples on opposite edges (left→right,
/// bottom→top, corners excluded); `corners` lists the four corner nodes
/// counter-clockwise from the bottom-left one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicPairs {
    pub pairs: Vec<(usize, usize)>,
    pub corners: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub kind: ElementKind,
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<Vec<usize>>,
    /// Material tag per element.
    pub phases: Vec<usize>,
    /// Nodes on the outer cell boundary.
    pub boundary_nodes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodic: Option<PeriodicPairs>,
    /// Area of the cell including meshed-out holes.
    pub cell_volume: f64,
}

impl Mesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_quadrature_points(&self) -> usize {
        4 * self.elements.len()
    }

    pub fn element_coords(&self, e: usize) -> Vec<[f64; 2]> {
        self.elements[e].iter().map(|&n| self.nodes[n]).collect()
    }

    /// Bounding box `[xmin, ymin, xmax, ymax]`.
    pub fn bounds(&self) -> [f64; 4] {
        let mut b = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for p in &self.nodes {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }

    /// Checks connectivity, Jacobian positivity and the periodic pairing.
    pub fn validate(&self) -> Result<()> {
        let nn = self.kind.nodes_per_element();
        if self.elements.is_empty() {
            return Err(Error::InvalidMesh("mesh has no elements".into()));
        }
        if self.phases.len() != self.elements.len() {
            return Err(Error::InvalidMesh(format!(
                "{} phase ids for {} elements",
                self.phases.len(),
                self.elements.len()
            )));
        }
        for (e, conn) in self.elements.iter().enumerate() {
            if conn.len() != nn {
                return Err(Error::InvalidMesh(format!(
                    "element {e} has {} nodes, expected {nn}",
                    conn.len()
                )));
            }
            if let Some(&bad) = conn.iter().find(|&&n| n >= self.nodes.len()) {
                return Err(Error::InvalidMesh(format!(
                    "element {e} references node {bad} of {}",
                    self.nodes.len()
                )));
            }
            element_quadrature(self.kind, &self.element_coords(e)).map_err(|det| {
                Error::InvalidMesh(format!("element {e} has non-positive Jacobian {det:.3e}"))
            })?;
        }
        if let Some(&bad) = self.boundary_nodes.iter().find(|&&n| n >= self.nodes.len()) {
            return Err(Error::InvalidMesh(format!(
                "boundary node {bad} out of range"
            )));
        }
        if !(self.cell_volume > 0.0) {
            return Err(Error::InvalidMesh("cell volume must be positive".into()));
        }
        if let Some(p) = &self.periodic {
            self.validate_periodic(p)?;
        }
        Ok(())
    }

    fn validate_periodic(&self, p: &PeriodicPairs) -> Result<()> {
        let [x0, y0, x1, y1] = self.bounds();
        let (lx, ly) = (x1 - x0, y1 - y0);
        let tol = 1e-9 * lx.max(ly);
        let mut seen_slave = vec![false; self.nodes.len()];
        let mut seen_master = vec![false; self.nodes.len()];
        for &(m, s) in &p.pairs {
            if m >= self.nodes.len() || s >= self.nodes.len() {
                return Err(Error::InvalidMesh(format!(
                    "periodic pair ({m},{s}) out of range"
                )));
            }
            if seen_slave[s] || seen_master[m] || seen_master[s] || seen_slave[m] {
                return Err(Error::InvalidMesh(format!(
                    "periodic pair ({m},{s}) repeats a node"
                )));
            }
            seen_slave[s] = true;
            seen_master[m] = true;
            let (a, b) = (self.nodes[m], self.nodes[s]);
            let dx = [b[0] - a[0], b[1] - a[1]];
            let horizontal = (dx[0] - lx).abs() < tol && dx[1].abs() < tol;
            let vertical = dx[0].abs() < tol && (dx[1] - ly).abs() < tol;
            if !(horizontal || vertical) {
                return Err(Error::InvalidMesh(format!(
                    "periodic pair ({m},{s}) is not a lattice translate"
                )));
            }
        }
        let expected = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
        for (c, e) in p.corners.iter().zip(expected.iter()) {
            let x = self
                .nodes
                .get(*c)
                .ok_or_else(|| Error::InvalidMesh(format!("periodic corner {c} out of range")))?;
            if (x[0] - e[0]).abs() > tol || (x[1] - e[1]).abs() > tol {
                return Err(Error::InvalidMesh(format!(
                    "periodic corner {c} is misplaced"
                )));
            }
        }
        // every boundary node other than corners must be a master or a slave
        for &n in &self.boundary_nodes {
            if p.corners.contains(&n) {
                continue;
            }
            if !(seen_master[n] || seen_slave[n]) {
                return Err(Error::InvalidMesh(format!("boundary node {n} is unpaired")));
            }
        }
        Ok(())
    }

    /// Reference quadrature data for every element.
    pub fn quadrature(&self) -> Result<Vec<Vec<QuadPoint>>> {
        (0..self.elements.len())
            .map(|e| {
                element_quadrature(self.kind, &self.element_coords(e)).map_err(|det| {
                    Error::InvalidMesh(format!("element {e} has non-positive Jacobian {det:.3e}"))
                })
            })
            .collect()
    }

    /// Flattened quadrature weights (weight × reference Jacobian), element-major.
    pub fn quadrature_weights(&self) -> Result<Vec<f64>> {
        Ok(self
            .quadrature()?
            .iter()
            .flat_map(|qps| qps.iter().map(|q| q.weight))
            .collect())
    }

    /// Total area per phase id.
    pub fn phase_areas(&self) -> Result<HashMap<usize, f64>> {
        let mut out = HashMap::new();
        for (e, qps) in self.quadrature()?.iter().enumerate() {
            *out.entry(self.phases[e]).or_insert(0.0) += qps.iter().map(|q| q.weight).sum::<f64>();
        }
        Ok(out)
    }

    /// Element edges that belong to exactly one element, as
    /// `(element, local edge index)`.
    pub fn free_edges(&self) -> Vec<(usize, usize)> {
        let mut count: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
        for (e, conn) in self.elements.iter().enumerate() {
            for edge in 0..4 {
                let (a, b) = (conn[edge], conn[(edge + 1) % 4]);
                count
                    .entry((a.min(b), a.max(b)))
                    .or_default()
                    .push((e, edge));
            }
        }
        let mut out: Vec<(usize, usize)> = count
            .into_values()
            .filter(|v| v.len() == 1)
            .map(|v| v[0])
            .collect();
        out.sort_unstable();
        out
    }

    /// SHA-256 over the geometry, connectivity and phase layout.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"rbhomog-mesh-v1");
        h.update([match self.kind {
            ElementKind::Quad4 => 4u8,
            ElementKind::Quad8 => 8u8,
        }]);
        h.update((self.nodes.len() as u64).to_le_bytes());
        for p in &self.nodes {
            h.update(p[0].to_le_bytes());
            h.update(p[1].to_le_bytes());
        }
        h.update((self.elements.len() as u64).to_le_bytes());
        for (conn, phase) in self.elements.iter().zip(&self.phases) {
            for &n in conn {
                h.update((n as u64).to_le_bytes());
            }
            h.update((*phase as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        to_hex(&self.hash())
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_elements() -> Mesh {
        Mesh {
            kind: ElementKind::Quad4,
            nodes: vec![
                [0.0, 0.0],
                [1.0, 0.0],
                [2.0, 0.0],
                [0.0, 1.0],
                [1.0, 1.0],
                [2.0, 1.0],
            ],
            elements: vec![vec![0, 1, 4, 3], vec![1, 2, 5, 4]],
            phases: vec![0, 1],
            boundary_nodes: vec![0, 1, 2, 3, 4, 5],
            periodic: None,
            cell_volume: 2.0,
        }
    }

    #[test]
    fn validation_catches_bad_connectivity() {
        let mut m = two_elements();
        m.validate().unwrap();
        m.elements[1][2] = 17;
        assert!(matches!(m.validate(), Err(Error::InvalidMesh(_))));
        let mut m = two_elements();
        m.elements[0] = vec![0, 3, 4, 1];
        assert!(m.validate().is_err());
    }

    #[test]
    fn free_edges_skip_shared_edge() {
        assert_eq!(two_elements().free_edges().len(), 6);
    }

    #[test]
    fn hash_depends_on_phases() {
        let a = two_elements();
        let mut b = two_elements();
        b.phases[1] = 0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_hex().len(), 64);
    }
}
