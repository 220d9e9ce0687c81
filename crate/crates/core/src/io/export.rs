//! Text formats: mesh JSON, legacy VTK and CSV tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::binary::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::micro_fem::{Mesh, GAUSS_2X2};

const MESH_FORMAT: &str = "rbhomog-mesh";
const MESH_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MeshDocument {
    format: String,
    version: u32,
    mesh: Mesh,
}

pub fn mesh_to_json(mesh: &Mesh) -> Result<String> {
    Ok(serde_json::to_string_pretty(&MeshDocument {
        format: MESH_FORMAT.into(),
        version: MESH_VERSION,
        mesh: mesh.clone(),
    })?)
}

/// Parses and validates a mesh document.
pub fn mesh_from_json(text: &str) -> Result<Mesh> {
    let header: serde_json::Value = serde_json::from_str(text)?;
    let format = header
        .get("format")
        .and_then(|v| v.as_str())
        .unwrap_or_default();
    let version = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if format != MESH_FORMAT || version != MESH_VERSION as u64 {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "expected {MESH_FORMAT} version {MESH_VERSION}, found {format:?} version {version}"
            ),
        });
    }
    let doc: MeshDocument = serde_json::from_value(header)?;
    doc.mesh.validate()?;
    Ok(doc.mesh)
}

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    write_atomic(path, mesh_to_json(mesh)?.as_bytes())
}

pub fn load_mesh(path: &Path) -> Result<Mesh> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format {
        offset: e.utf8_error().valid_up_to(),
        message: "mesh file is not UTF-8".into(),
    })?;
    mesh_from_json(&text)
}

/// Values per quadrature point (element-major, 4 per element).
#[derive(Clone, Debug)]
pub struct CellField {
    pub name: String,
    pub components: usize,
    pub values: Vec<f64>,
}

impl CellField {
    pub fn scalar(name: &str, values: Vec<f64>) -> Self {
        CellField {
            name: name.into(),
            components: 1,
            values,
        }
    }

    /// Row-major 2×2 tensors.
    pub fn tensor(name: &str, values: &[[f64; 4]]) -> Self {
        CellField {
            name: name.into(),
            components: 4,
            values: values.iter().flatten().copied().collect(),
        }
    }
}

/// Nodal vectors of the underlying mesh.
#[derive(Clone, Debug)]
pub struct PointField {
    pub name: String,
    pub values: Vec<[f64; 2]>,
}

/// Legacy ASCII VTK on a quadrature subgrid: every element is split into
/// four quads, one around each Gauss point, so per-point data becomes cell
/// data. Nodal fields are interpolated onto the subgrid.
pub fn vtk_string(mesh: &Mesh, cells: &[CellField], points: &[PointField]) -> Result<String> {
    let n_qp = mesh.num_quadrature_points();
    for f in cells {
        if f.components == 0 || f.components > 4 || f.values.len() != n_qp * f.components {
            return Err(Error::DimensionMismatch {
                expected: n_qp * f.components.clamp(1, 4),
                got: f.values.len(),
            });
        }
    }
    for f in points {
        if f.values.len() != mesh.num_nodes() {
            return Err(Error::DimensionMismatch {
                expected: mesh.num_nodes(),
                got: f.values.len(),
            });
        }
    }
    let kind = mesh.kind;
    let nn = kind.nodes_per_element();
    let mut shape = vec![0.0; nn];
    let mut dshape = vec![[0.0; 2]; nn];
    // 3×3 lattice of natural coordinates per element
    let lattice: Vec<(f64, f64)> = (0..3)
        .flat_map(|j| (0..3).map(move |i| (i as f64 - 1.0, j as f64 - 1.0)))
        .collect();
    let mut coords = Vec::with_capacity(9 * mesh.num_elements());
    let mut interpolated: Vec<Vec<[f64; 2]>> =
        vec![Vec::with_capacity(coords.capacity()); points.len()];
    for conn in &mesh.elements {
        for &(xi, eta) in &lattice {
            kind.shape(xi, eta, &mut shape, &mut dshape);
            let mut x = [0.0; 2];
            for (a, &node) in conn.iter().enumerate() {
                x[0] += shape[a] * mesh.nodes[node][0];
                x[1] += shape[a] * mesh.nodes[node][1];
            }
            coords.push(x);
            for (f, out) in points.iter().zip(&mut interpolated) {
                let mut v = [0.0; 2];
                for (a, &node) in conn.iter().enumerate() {
                    v[0] += shape[a] * f.values[node][0];
                    v[1] += shape[a] * f.values[node][1];
                }
                out.push(v);
            }
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# vtk DataFile Version 3.0\nquadrature fields\nASCII\nDATASET UNSTRUCTURED_GRID"
    );
    let _ = writeln!(s, "POINTS {} double", coords.len());
    for x in &coords {
        let _ = writeln!(s, "{:e} {:e} 0", x[0], x[1]);
    }
    let _ = writeln!(s, "CELLS {} {}", n_qp, 5 * n_qp);
    for e in 0..mesh.num_elements() {
        for &(gx, gy, _) in GAUSS_2X2.iter() {
            // lattice indices of the quadrant around the Gauss point
            let (i0, j0) = (if gx < 0.0 { 0 } else { 1 }, if gy < 0.0 { 0 } else { 1 });
            let id = |i: usize, j: usize| 9 * e + 3 * j + i;
            let _ = writeln!(
                s,
                "4 {} {} {} {}",
                id(i0, j0),
                id(i0 + 1, j0),
                id(i0 + 1, j0 + 1),
                id(i0, j0 + 1)
            );
        }
    }
    let _ = writeln!(s, "CELL_TYPES {n_qp}");
    for _ in 0..n_qp {
        s.push_str("9\n");
    }
    if !cells.is_empty() {
        let _ = writeln!(s, "CELL_DATA {n_qp}");
        for f in cells {
            let _ = writeln!(
                s,
                "SCALARS {} double {}\nLOOKUP_TABLE default",
                vtk_name(&f.name),
                f.components
            );
            for row in f.values.chunks_exact(f.components) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        }
    }
    if !points.is_empty() {
        let _ = writeln!(s, "POINT_DATA {}", coords.len());
        for (f, values) in points.iter().zip(&interpolated) {
            let _ = writeln!(s, "VECTORS {} double", vtk_name(&f.name));
            for v in values {
                let _ = writeln!(s, "{:e} {:e} 0", v[0], v[1]);
            }
        }
    }
    Ok(s)
}

fn vtk_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_whitespace() { '_' } else { c })
        .collect()
}

pub fn write_vtk(
    path: &Path,
    mesh: &Mesh,
    cells: &[CellField],
    points: &[PointField],
) -> Result<()> {
    write_atomic(path, vtk_string(mesh, cells, points)?.as_bytes())
}

/// A CSV table with a header row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: ToString>(header: &[S]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<T: ToString>(&mut self, row: impl IntoIterator<Item = T>) -> Result<()> {
        let row: Vec<String> = row.into_iter().map(|v| v.to_string()).collect();
        if row.len() != self.header.len() {
            return Err(Error::DimensionMismatch {
                expected: self.header.len(),
                got: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::InvalidInput(format!("csv encoding: {e}"));
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidInput(format!("csv encoding: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Table> {
        let mut r =
            csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let header = r
            .headers()
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?
            .iter()
            .map(String::from)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        Ok(Table { header, rows })
    }
}
