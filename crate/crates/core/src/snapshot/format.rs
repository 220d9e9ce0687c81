//! Versioned binary snapshot files and CSV export.

use std::path::Path;
use std::sync::Arc;

use super::{ParameterPoint, SnapshotSet};
use crate::error::{Error, Result};
use crate::io::binary::{read_file, ByteReader, ByteWriter};
use crate::micro_fem::{to_hex, QuadratureStressField};

const MAGIC: &[u8; 8] = b"RBHSNAP1";
const VERSION: u32 = 1;

pub(crate) fn encode(set: &SnapshotSet) -> Result<Vec<u8>> {
    set.validate()?;
    let (n_qp, d) = (set.num_quadrature_points(), set.param_dim());
    let mut w = ByteWriter::new(MAGIC, VERSION);
    w.usize(n_qp);
    w.usize(set.len());
    w.usize(d);
    w.bytes(&set.mesh_hash);
    w.bytes(&set.settings_hash);
    w.f64(set.total_volume());
    w.f64s(set.weights());
    for (p, f) in set.params.iter().zip(&set.fields) {
        w.f64s(&p.values());
        for s in &f.stress {
            w.f64s(s);
        }
    }
    Ok(w.finish())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<SnapshotSet> {
    let mut r = ByteReader::open(bytes, MAGIC, VERSION)?;
    let n_qp = r.count(8)?;
    let n = r.count(8)?;
    let d = r.count(8)?;
    if n == 0 || n_qp == 0 || d < 3 {
        return Err(r.error(format!(
            "bad header: {n} snapshots, {n_qp} points, {d} parameters"
        )));
    }
    let mesh_hash = r.array::<32>()?;
    let settings_hash = r.array::<32>()?;
    let total_volume = r.f64()?;
    let weights: Arc<[f64]> = r.f64s(n_qp)?.into();
    let mut params = Vec::with_capacity(n);
    let mut fields = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(ParameterPoint::from_values(&r.f64s(d)?)?);
        let flat = r.f64s(4 * n_qp)?;
        let stress = flat
            .chunks_exact(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        fields.push(QuadratureStressField {
            stress,
            weights: weights.clone(),
            total_volume,
        });
    }
    r.finish()?;
    let set = SnapshotSet {
        params,
        fields,
        mesh_hash,
        settings_hash,
    };
    set.validate().map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })?;
    Ok(set)
}

pub fn save_snapshots(set: &SnapshotSet, path: &Path) -> Result<()> {
    crate::io::binary::write_atomic(path, &encode(set)?)
}

pub fn load_snapshots(path: &Path) -> Result<SnapshotSet> {
    decode(&read_file(path)?)
}

/// Loads a set and checks that it was generated on the mesh with `mesh_hash`.
pub fn load_snapshots_for_mesh(path: &Path, mesh_hash: &[u8; 32]) -> Result<SnapshotSet> {
    let set = load_snapshots(path)?;
    if &set.mesh_hash != mesh_hash {
        return Err(Error::MeshMismatch {
            expected: to_hex(mesh_hash),
            found: to_hex(&set.mesh_hash),
        });
    }
    Ok(set)
}

/// One row per snapshot and quadrature point.
pub fn write_snapshots_csv(set: &SnapshotSet, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec![
        "snapshot".to_string(),
        "U11".into(),
        "U22".into(),
        "U12".into(),
    ];
    header.extend((0..set.param_dim() - 3).map(|k| format!("mu{k}")));
    header.extend(["qp", "weight", "P11", "P12", "P21", "P22"].map(String::from));
    w.write_record(&header).map_err(csv_err(path))?;
    for (i, (p, f)) in set.params.iter().zip(&set.fields).enumerate() {
        let pv: Vec<String> = p.values().iter().map(|v| v.to_string()).collect();
        for (q, s) in f.stress.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(pv.iter().cloned());
            row.push(q.to_string());
            row.push(f.weights[q].to_string());
            row.extend(s.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}
