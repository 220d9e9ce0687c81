use std::path::{Path, PathBuf};
use std::sync::Arc;

use rbhomog_core::gpr::GprOptions;
use rbhomog_core::io::{load_mesh, MeshSpec};
use rbhomog_core::macro_fem::MacroOptions;
use rbhomog_core::micro_fem::{BoundaryCondition, Mesh, NewtonOptions};
use rbhomog_core::pod::BasisSelector;
use rbhomog_core::snapshot::{MaterialConfig, ParameterSpace};
use rbhomog_core::tensor_mech::MaterialParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Porous,
    Fiber,
    Custom,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub preset: Preset,
    #[serde(default = "one")]
    pub refine: usize,
    /// Mesh JSON for the custom preset, relative to the config file.
    pub mesh: Option<PathBuf>,
    #[serde(default)]
    pub boundary: Option<BoundaryCondition>,
    /// `(c1, d1)` per phase.
    pub materials: Option<Vec<[f64; 2]>>,
    /// Phase whose `c1 = d1` is sampled.
    pub sampled_phase: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Bounds of `Ū − I` for `(U11, U22, U12)`.
    pub stretch: Option<[[f64; 2]; 3]>,
    pub material: Option<Vec<[f64; 2]>>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub corners: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub n_pod: Option<usize>,
    pub n_reg: Option<usize>,
    /// Number of basis functions `L`.
    pub basis: Option<usize>,
    /// Energy fraction, used when `basis` is absent.
    pub energy: Option<f64>,
    #[serde(default)]
    pub gpr: GprOptions,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwoScaleMode {
    #[default]
    Both,
    Fe2,
    Surrogate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoScaleConfig {
    pub mode: TwoScaleMode,
    /// Cook mesh parameter: `2n × n` elements.
    pub cook_n: usize,
    pub traction: f64,
    pub steps: usize,
    /// Sampled material values held fixed in the macro problem.
    pub material: Option<Vec<f64>>,
    /// Reference locations of the microscopic comparison points.
    pub points: Vec<[f64; 2]>,
    /// Model archive; defaults to the one written by `train`.
    pub model: Option<PathBuf>,
    pub newton: MacroOptions,
    pub warm_start: bool,
}

impl Default for TwoScaleConfig {
    fn default() -> Self {
        TwoScaleConfig {
            mode: TwoScaleMode::Both,
            cook_n: 4,
            traction: 0.1,
            steps: 5,
            material: None,
            points: vec![[4.0, 50.0], [36.0, 50.0]],
            model: None,
            newton: MacroOptions::default(),
            warm_start: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub solver: NewtonOptions,
    #[serde(default)]
    pub twoscale: TwoScaleConfig,
    #[serde(default)]
    pub workers: usize,
    pub output: Option<PathBuf>,
}

fn one() -> usize {
    1
}

/// Command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

/// A validated configuration with preset defaults filled in.
pub struct Resolved {
    pub raw: RunConfig,
    pub mesh: Arc<Mesh>,
    pub boundary: BoundaryCondition,
    pub materials: MaterialConfig,
    pub space: ParameterSpace,
    pub n_train: usize,
    pub n_test: usize,
    pub corners: bool,
    pub seed: u64,
    pub n_pod: usize,
    pub n_reg: usize,
    pub selector: BasisSelector,
    pub twoscale_material: Vec<f64>,
    pub output: PathBuf,
    pub workers: usize,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn load(path: &Path, ov: &Overrides) -> Result<Resolved, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
    let raw: RunConfig = toml::from_str(&text)
        .map_err(|e| bad(format!("invalid config {}: {e}", path.display())))?;
    resolve(raw, path.parent().unwrap_or(Path::new(".")), ov)
}

pub fn resolve(mut raw: RunConfig, base: &Path, ov: &Overrides) -> Result<Resolved, CliError> {
    let p = &raw.problem;
    let (spec, def_mats, def_phase, def_stretch, def_mat_box, def_corners): (
        Option<MeshSpec>,
        Vec<[f64; 2]>,
        Option<usize>,
        Option<f64>,
        Vec<[f64; 2]>,
        bool,
    ) = match p.preset {
        Preset::Porous => (
            Some(MeshSpec::porous(p.refine)),
            vec![[1.0, 1.0]],
            None,
            Some(0.05),
            vec![],
            false,
        ),
        Preset::Fiber => (
            Some(MeshSpec::fiber(p.refine)),
            vec![[1.0, 1.0], [100.0, 100.0]],
            Some(1),
            Some(0.3),
            vec![[50.0, 150.0]],
            true,
        ),
        Preset::Custom => (None, vec![], None, None, vec![], false),
    };
    let mesh = match (&spec, &p.mesh) {
        (Some(_), Some(_)) => {
            return Err(bad("problem.mesh is only allowed with preset = \"custom\""))
        }
        (Some(s), None) => s.build().map_err(|e| bad(format!("mesh preset: {e}")))?,
        (None, Some(m)) => {
            load_mesh(&base.join(m)).map_err(|e| bad(format!("custom mesh: {e}")))?
        }
        (None, None) => return Err(bad("preset = \"custom\" needs problem.mesh")),
    };
    let mats = p.materials.clone().unwrap_or(def_mats);
    if mats.is_empty() {
        return Err(bad("problem.materials is required for custom meshes"));
    }
    let phases = mats
        .iter()
        .map(|m| MaterialParams::new(m[0], m[1]))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    let max_phase = mesh.phases.iter().copied().max().unwrap_or(0);
    if max_phase >= phases.len() {
        return Err(bad(format!(
            "mesh uses phase {max_phase} but only {} materials are given",
            phases.len()
        )));
    }
    let materials = match p.sampled_phase.or(def_phase) {
        Some(phase) if phase < phases.len() => MaterialConfig::Coupled {
            base: phases,
            phase,
        },
        Some(phase) => return Err(bad(format!("sampled_phase {phase} has no material"))),
        None => MaterialConfig::Fixed { phases },
    };

    let s = &raw.sampling;
    let stretch = match (s.stretch, def_stretch) {
        (Some(b), _) => b.map(|[lo, hi]| (lo, hi)),
        (None, Some(h)) => [(-h, h); 3],
        (None, None) => return Err(bad("sampling.stretch is required for custom meshes")),
    };
    let material: Vec<(f64, f64)> = s
        .material
        .clone()
        .unwrap_or(def_mat_box)
        .iter()
        .map(|[lo, hi]| (*lo, *hi))
        .collect();
    if material.len() != materials.num_sampled() {
        return Err(bad(format!(
            "sampling.material has {} ranges but {} material values are sampled",
            material.len(),
            materials.num_sampled()
        )));
    }
    for &(lo, hi) in stretch.iter().chain(&material) {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(bad(format!("invalid bounds ({lo}, {hi})")));
        }
    }
    if stretch[0].0 <= -1.0 || stretch[1].0 <= -1.0 {
        return Err(bad("stretch bounds must keep the diagonal of U positive"));
    }
    if material.iter().any(|&(lo, _)| lo <= 0.0) {
        return Err(bad("material bounds must be positive"));
    }
    let space = ParameterSpace {
        stretch_offset: stretch,
        material,
    };
    let n_train = s.n_train.unwrap_or(50);
    let n_test = s.n_test.unwrap_or(200);
    let corners = s.corners.unwrap_or(def_corners);
    if n_train < 2 {
        return Err(bad("sampling.n_train must be at least 2"));
    }
    if corners && n_train < (1 << space.bounds().len()) {
        return Err(bad(format!(
            "n_train = {n_train} cannot hold the {} box corners",
            1 << space.bounds().len()
        )));
    }

    let t = &raw.training;
    let n_pod = t.n_pod.unwrap_or(n_train);
    let n_reg = t.n_reg.unwrap_or(n_train);
    if n_pod == 0 || n_pod > n_train || n_reg < 2 || n_reg > n_train {
        return Err(bad(format!(
            "need 1 <= n_pod <= n_train and 2 <= n_reg <= n_train (n_train = {n_train})"
        )));
    }
    let selector = match (t.basis, t.energy) {
        (Some(l), _) if l == 0 || l > n_pod => {
            return Err(bad(format!(
                "training.basis = {l} must lie in 1..=n_pod ({n_pod})"
            )));
        }
        (Some(l), _) => BasisSelector::count(l),
        (None, Some(e)) if e > 0.0 && e <= 1.0 => BasisSelector::energy(e),
        (None, Some(e)) => return Err(bad(format!("training.energy = {e} must lie in (0, 1]"))),
        (None, None) => BasisSelector::count(20.min(n_pod)),
    };

    let ts = &raw.twoscale;
    let twoscale_material = match &ts.material {
        Some(m) => m.clone(),
        None => space
            .material
            .iter()
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect(),
    };
    if twoscale_material.len() != space.material.len() {
        return Err(bad(
            "twoscale.material must give one value per sampled material parameter",
        ));
    }
    if ts.cook_n == 0 || ts.steps == 0 {
        return Err(bad("twoscale.cook_n and twoscale.steps must be positive"));
    }

    if let Some(seed) = ov.seed {
        raw.sampling.seed = Some(seed);
    }
    if let Some(w) = ov.workers {
        raw.workers = w;
    }
    let output = ov
        .out
        .clone()
        .or_else(|| raw.output.clone().map(|o| base.join(o)))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Resolved {
        boundary: raw.problem.boundary.unwrap_or(BoundaryCondition::Linear),
        mesh: Arc::new(mesh),
        materials,
        space,
        n_train,
        n_test,
        corners,
        seed: raw.sampling.seed.unwrap_or(1),
        n_pod,
        n_reg,
        selector,
        twoscale_material,
        output,
        workers: raw.workers,
        raw,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Resolved {
    /// Identifies everything that determines the snapshot files.
    pub fn data_hash(&self) -> String {
        let v = serde_json::json!({
            "mesh": self.mesh.hash_hex(),
            "boundary": self.boundary,
            "materials": self.materials,
            "space": self.space,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "corners": self.corners,
            "seed": self.seed,
            "solver": self.raw.solver,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    /// Identifies the trained model given the data.
    pub fn training_hash(&self) -> String {
        let v = serde_json::json!({
            "data": self.data_hash(),
            "n_pod": self.n_pod,
            "n_reg": self.n_reg,
            "selector": self.selector,
            "gpr": self.raw.training.gpr,
        });
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn newton(&self) -> NewtonOptions {
        self.raw.solver
    }
}
