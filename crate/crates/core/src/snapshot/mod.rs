//! Parameter sampling and batched high-fidelity snapshot generation.

mod format;
mod sobol;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::micro_fem::{MicroSolution, NewtonOptions, QuadratureStressField, RveSolver};
use crate::tensor_mech::{MaterialParams, Tensor2};

pub use format::{load_snapshots, load_snapshots_for_mesh, save_snapshots, write_snapshots_csv};
pub use sobol::{Sobol, MAX_DIMENSION};

/// One loading/material configuration: `(Ū11, Ū22, Ū12)` plus sampled
/// material values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub stretch: [f64; 3],
    pub material: Vec<f64>,
}

impl ParameterPoint {
    pub fn new(stretch: [f64; 3], material: Vec<f64>) -> Self {
        ParameterPoint { stretch, material }
    }

    /// Interprets `values` as `(Ū11, Ū22, Ū12, μ...)`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: values.len(),
            });
        }
        Ok(ParameterPoint {
            stretch: [values[0], values[1], values[2]],
            material: values[3..].to_vec(),
        })
    }

    pub fn identity(material: Vec<f64>) -> Self {
        ParameterPoint {
            stretch: [1.0, 1.0, 0.0],
            material,
        }
    }

    pub fn dim(&self) -> usize {
        3 + self.material.len()
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = self.stretch.to_vec();
        v.extend_from_slice(&self.material);
        v
    }

    pub fn stretch_tensor(&self) -> Tensor2 {
        Tensor2::symmetric(self.stretch[0], self.stretch[1], self.stretch[2])
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.stretch;
        if !(a > 0.0 && a * b - c * c > 0.0) || self.material.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "stretch {:?} is not positive definite",
                self.stretch
            )));
        }
        Ok(())
    }
}

/// How the sampled material values map onto per-phase parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaterialConfig {
    /// Phase parameters fixed; no material values are sampled.
    Fixed { phases: Vec<MaterialParams> },
    /// One sampled scalar sets `c1 = d1` of `phase`; other phases keep `base`.
    Coupled {
        base: Vec<MaterialParams>,
        phase: usize,
    },
}

impl MaterialConfig {
    pub fn num_sampled(&self) -> usize {
        match self {
            MaterialConfig::Fixed { .. } => 0,
            MaterialConfig::Coupled { .. } => 1,
        }
    }

    pub fn materials(&self, material: &[f64]) -> Result<Vec<MaterialParams>> {
        if material.len() != self.num_sampled() {
            return Err(Error::DimensionMismatch {
                expected: self.num_sampled(),
                got: material.len(),
            });
        }
        match self {
            MaterialConfig::Fixed { phases } => Ok(phases.clone()),
            MaterialConfig::Coupled { base, phase } => {
                let mut out = base.clone();
                let slot = out.get_mut(*phase).ok_or_else(|| {
                    Error::InvalidInput(format!("no base material for phase {phase}"))
                })?;
                *slot = MaterialParams::new(material[0], material[0])?;
                Ok(out)
            }
        }
    }
}

/// Sampling box: offsets of `Ū − I` per stretch component and absolute
/// ranges of the sampled material values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    pub stretch_offset: [(f64, f64); 3],
    #[serde(default)]
    pub material: Vec<(f64, f64)>,
}

impl ParameterSpace {
    pub fn cube(half_width: f64) -> Self {
        ParameterSpace {
            stretch_offset: [(-half_width, half_width); 3],
            material: Vec::new(),
        }
    }

    /// Absolute bounds in `(Ū11, Ū22, Ū12, μ...)` order.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let [a, b, c] = self.stretch_offset;
        let mut out = vec![(1.0 + a.0, 1.0 + a.1), (1.0 + b.0, 1.0 + b.1), c];
        out.extend_from_slice(&self.material);
        out
    }
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::InvalidInput("no sampling dimensions".into()));
    }
    if bounds.len() > MAX_DIMENSION {
        return Err(Error::UnsupportedDimension(bounds.len()));
    }
    for (k, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidInput(format!(
                "bounds of dimension {k} are not an interval: ({lo}, {hi})"
            )));
        }
    }
    Ok(())
}

fn map_unit(u: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    u.iter()
        .zip(bounds)
        .map(|(x, (lo, hi))| lo + x * (hi - lo))
        .collect()
}

/// Unscrambled Sobol points mapped into `bounds`, optionally preceded by the
/// `2^d` corners of the box.
pub fn sobol_sample(
    n: usize,
    bounds: &[(f64, f64)],
    include_corners: bool,
) -> Result<Vec<Vec<f64>>> {
    check_bounds(bounds)?;
    let d = bounds.len();
    if n == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let mut out = Vec::with_capacity(n);
    if include_corners {
        let corners = 1usize << d;
        if n < corners {
            return Err(Error::InvalidInput(format!(
                "{n} samples cannot hold the {corners} box corners"
            )));
        }
        for i in 0..corners {
            let u: Vec<f64> = (0..d).map(|k| ((i >> k) & 1) as f64).collect();
            out.push(map_unit(&u, bounds));
        }
    }
    for u in Sobol::new(d)?.take(n - out.len()) {
        out.push(map_unit(&u, bounds));
    }
    Ok(out)
}

/// Seeded uniform draws inside `bounds`.
pub fn uniform_sample(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<Vec<Vec<f64>>> {
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let u: Vec<f64> = (0..bounds.len()).map(|_| rng.random::<f64>()).collect();
            map_unit(&u, bounds)
        })
        .collect())
}

fn to_points(raw: Vec<Vec<f64>>) -> Result<Vec<ParameterPoint>> {
    raw.iter()
        .map(|v| {
            let p = ParameterPoint::from_values(v)?;
            p.validate()?;
            Ok(p)
        })
        .collect()
}

impl ParameterSpace {
    pub fn sobol(&self, n: usize, include_corners: bool) -> Result<Vec<ParameterPoint>> {
        to_points(sobol_sample(n, &self.bounds(), include_corners)?)
    }

    pub fn uniform(&self, n: usize, seed: u64) -> Result<Vec<ParameterPoint>> {
        to_points(uniform_sample(n, &self.bounds(), seed)?)
    }
}

/// Stress-field snapshots sharing one quadrature layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    pub params: Vec<ParameterPoint>,
    pub fields: Vec<QuadratureStressField>,
    pub mesh_hash: [u8; 32],
    /// Hash of the boundary condition, solver options and material config.
    pub settings_hash: [u8; 32],
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn num_quadrature_points(&self) -> usize {
        self.fields.first().map_or(0, |f| f.len())
    }

    pub fn param_dim(&self) -> usize {
        self.params.first().map_or(0, |p| p.dim())
    }

    pub fn weights(&self) -> &Arc<[f64]> {
        &self.fields[0].weights
    }

    pub fn total_volume(&self) -> f64 {
        self.fields[0].total_volume
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::InvalidInput("empty snapshot set".into()));
        }
        if self.fields.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: self.fields.len(),
            });
        }
        let (w0, v0, d) = (self.weights(), self.total_volume(), self.param_dim());
        for (f, p) in self.fields.iter().zip(&self.params) {
            f.validate()?;
            if f.weights[..] != w0[..] || f.total_volume != v0 {
                return Err(Error::InvalidInput(
                    "snapshots do not share one quadrature layout".into(),
                ));
            }
            if p.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.dim(),
                });
            }
        }
        Ok(())
    }

    /// The first `n` snapshots.
    pub fn prefix(&self, n: usize) -> Result<SnapshotSet> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidInput(format!(
                "prefix {n} of a set with {} snapshots",
                self.len()
            )));
        }
        Ok(SnapshotSet {
            params: self.params[..n].to_vec(),
            fields: self.fields[..n].to_vec(),
            mesh_hash: self.mesh_hash,
            settings_hash: self.settings_hash,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub newton: NewtonOptions,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    /// Drop failed points instead of aborting.
    pub skip_failures: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            newton: NewtonOptions::default(),
            workers: 0,
            skip_failures: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FailedPoint {
    pub index: usize,
    pub params: ParameterPoint,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub set: SnapshotSet,
    pub failures: Vec<FailedPoint>,
}

pub fn settings_hash(
    solver: &RveSolver,
    materials: &MaterialConfig,
    opts: &NewtonOptions,
) -> [u8; 32] {
    let text = serde_json::json!({
        "bc": solver.boundary_condition(),
        "newton": opts,
        "materials": materials,
    })
    .to_string();
    Sha256::digest(text.as_bytes()).into()
}

/// Solves the RVE at every point. Results keep the order of `points`
/// regardless of the number of workers.
pub fn generate_snapshots(
    points: &[ParameterPoint],
    solver: &RveSolver,
    materials: &MaterialConfig,
    opts: &GenerateOptions,
) -> Result<Generated> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no parameter points".into()));
    }
    for p in points {
        p.validate()?;
        if p.material.len() != materials.num_sampled() {
            return Err(Error::DimensionMismatch {
                expected: materials.num_sampled(),
                got: p.material.len(),
            });
        }
    }
    let solve_one = |p: &ParameterPoint| -> Result<MicroSolution> {
        let mats = materials.materials(&p.material)?;
        solver.solve(&p.stretch_tensor(), &mats, &opts.newton)
    };
    let results: Vec<Result<MicroSolution>> = if opts.workers == 1 {
        points.iter().map(solve_one).collect()
    } else if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
        pool.install(|| points.par_iter().map(solve_one).collect())
    } else {
        points.par_iter().map(solve_one).collect()
    };

    let mut params = Vec::with_capacity(points.len());
    let mut fields = Vec::with_capacity(points.len());
    let mut failures = Vec::new();
    for (index, (p, r)) in points.iter().zip(results).enumerate() {
        match r {
            Ok(sol) => {
                params.push(p.clone());
                fields.push(sol.stress_field);
            }
            Err(e) if opts.skip_failures => failures.push(FailedPoint {
                index,
                params: p.clone(),
                message: e.to_string(),
            }),
            Err(e) => {
                return Err(Error::SnapshotFailed {
                    index,
                    params: p.values(),
                    source: Box::new(e),
                })
            }
        }
    }
    if fields.is_empty() {
        return Err(Error::DegenerateData("every snapshot failed".into()));
    }
    let set = SnapshotSet {
        params,
        fields,
        mesh_hash: solver.mesh().hash(),
        settings_hash: settings_hash(solver, materials, &opts.newton),
    };
    Ok(Generated { set, failures })
}
