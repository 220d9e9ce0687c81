//! Versioned binary archive for trained surrogates.

use std::path::Path;
use std::sync::Arc;

use super::{ParamLayout, SurrogateModel};
use crate::error::{Error, Result};
use crate::gpr::{GprModel, InputNormalizer, Kernel};
use crate::io::binary::{read_file, write_atomic, ByteReader, ByteWriter};
use crate::micro_fem::to_hex;
use crate::pod::PodBasis;

const MAGIC: &[u8; 8] = b"RBHMODL1";
const VERSION: u32 = 1;

pub(crate) fn encode(m: &SurrogateModel) -> Result<Vec<u8>> {
    m.validate()?;
    let d = m.layout.dim();
    let mut w = ByteWriter::new(MAGIC, VERSION);
    w.bytes(&m.mesh_hash);
    w.bytes(&m.settings_hash);
    w.usize(d);
    for name in &m.layout.names {
        w.string(name);
    }
    w.f64s(&m.layout.lower);
    w.f64s(&m.layout.upper);

    let b = &m.basis;
    w.usize(b.num_quadrature_points());
    w.usize(b.len());
    w.usize(b.eigenvalues.len());
    w.f64(b.total_volume);
    w.f64(b.energy_captured);
    w.f64s(&b.weights);
    w.f64s(&b.eigenvalues);
    for f in &b.functions {
        for v in f {
            w.f64s(v);
        }
    }

    for r in &m.regressors {
        let n = r.train_inputs.len();
        w.usize(n);
        w.f64(r.kernel.sigma_f);
        w.f64s(&r.kernel.lengthscales);
        w.f64s(&r.normalizer.lower);
        w.f64s(&r.normalizer.span);
        for x in &r.train_inputs {
            w.f64s(x);
        }
        w.f64s(&r.train_targets);
        w.f64(r.target_offset);
        w.f64(r.target_scale);
        w.f64(r.jitter);
        w.f64(r.log_likelihood);
        w.f64s(&r.solved_weights);
        w.f64s(&r.factor);
    }
    Ok(w.finish())
}

pub(crate) fn decode(bytes: &[u8]) -> Result<SurrogateModel> {
    let mut r = ByteReader::open(bytes, MAGIC, VERSION)?;
    let mesh_hash = r.array::<32>()?;
    let settings_hash = r.array::<32>()?;
    let d = r.count(8)?;
    if d < 3 {
        return Err(r.error(format!("parameter dimension {d} < 3")));
    }
    let names = (0..d).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let layout = ParamLayout {
        names,
        lower: r.f64s(d)?,
        upper: r.f64s(d)?,
    };

    let n_qp = r.count(8)?;
    let l = r.count(8 * n_qp.max(1))?;
    let n_eig = r.count(8)?;
    if l == 0 || n_qp == 0 || n_eig < l {
        return Err(r.error(format!(
            "bad basis header: {l} functions, {n_qp} points, {n_eig} eigenvalues"
        )));
    }
    let total_volume = r.f64()?;
    let energy_captured = r.f64()?;
    let weights: Arc<[f64]> = r.f64s(n_qp)?.into();
    let eigenvalues = r.f64s(n_eig)?;
    let mut functions = Vec::with_capacity(l);
    for _ in 0..l {
        let flat = r.f64s(4 * n_qp)?;
        functions.push(
            flat.chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect(),
        );
    }
    let basis = PodBasis {
        functions,
        eigenvalues,
        weights,
        total_volume,
        energy_captured,
    };

    let mut regressors = Vec::with_capacity(l);
    for _ in 0..l {
        let n = r.count(8 * (d + 2))?;
        if n == 0 {
            return Err(r.error("regressor without training data"));
        }
        let sigma_f = r.f64()?;
        let lengthscales = r.f64s(d)?;
        let kernel = Kernel::new(sigma_f, lengthscales).map_err(|e| r.error(e.to_string()))?;
        let normalizer = InputNormalizer {
            lower: r.f64s(d)?,
            span: r.f64s(d)?,
        };
        let train_inputs = (0..n).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
        let train_targets = r.f64s(n)?;
        let target_offset = r.f64()?;
        let target_scale = r.f64()?;
        let jitter = r.f64()?;
        let log_likelihood = r.f64()?;
        let solved_weights = r.f64s(n)?;
        if r.remaining() / 8 < n * n {
            return Err(r.error(format!("factor of size {n}x{n} exceeds remaining data")));
        }
        let factor = r.f64s(n * n)?;
        regressors.push(GprModel {
            kernel,
            normalizer,
            train_inputs,
            train_targets,
            target_offset,
            target_scale,
            jitter,
            solved_weights,
            factor,
            log_likelihood,
        });
    }
    r.finish()?;
    let averages = basis.averages();
    let model = SurrogateModel {
        basis,
        regressors,
        layout,
        averages,
        mesh_hash,
        settings_hash,
    };
    model.validate().map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })?;
    Ok(model)
}

pub fn save_model(m: &SurrogateModel, path: &Path) -> Result<()> {
    write_atomic(path, &encode(m)?)
}

pub fn load_model(path: &Path) -> Result<SurrogateModel> {
    decode(&read_file(path)?)
}

/// Loads a model and checks that it was trained on the mesh with `mesh_hash`.
pub fn load_model_for_mesh(path: &Path, mesh_hash: &[u8; 32]) -> Result<SurrogateModel> {
    let m = load_model(path)?;
    if &m.mesh_hash != mesh_hash {
        return Err(Error::MeshMismatch {
            expected: to_hex(mesh_hash),
            found: to_hex(&m.mesh_hash),
        });
    }
    Ok(m)
}
