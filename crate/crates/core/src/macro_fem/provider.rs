use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::micro_fem::{MicroSolution, NewtonOptions, RveSolver};
use crate::surrogate::SurrogateModel;
use crate::tensor_mech::{stress_and_tangent, MaterialParams, Tensor2, Tensor4};

/// Maps a macroscopic deformation gradient at a quadrature point to the
/// effective stress and tangent. Implementations must tolerate concurrent
/// calls for distinct points.
pub trait ConstitutiveProvider: Sync {
    fn evaluate(&self, f_bar: &Tensor2, point: usize, step: usize) -> Result<(Tensor2, Tensor4)>;

    fn name(&self) -> String;

    /// Prepares per-point state for `n` quadrature points.
    fn reset(&self, _num_points: usize) {}
}

/// Homogeneous Neo-Hookean material.
#[derive(Clone, Debug)]
pub struct AnalyticProvider {
    pub material: MaterialParams,
}

impl ConstitutiveProvider for AnalyticProvider {
    fn evaluate(&self, f_bar: &Tensor2, _point: usize, _step: usize) -> Result<(Tensor2, Tensor4)> {
        stress_and_tangent(f_bar, &self.material)
    }

    fn name(&self) -> String {
        "analytic".into()
    }
}

/// FE² reference: an RVE solve with the perturbation tangent at every call.
pub struct NestedRveProvider {
    pub solver: RveSolver,
    pub materials: Vec<MaterialParams>,
    pub newton: NewtonOptions,
    /// Perturbation size; `None` picks it from `F̄`.
    pub perturbation: Option<f64>,
    /// Start each micro solve from the last converged state at that point.
    pub warm_start: bool,
    cache: Mutex<Vec<Option<Arc<MicroSolution>>>>,
}

impl NestedRveProvider {
    pub fn new(solver: RveSolver, materials: Vec<MaterialParams>) -> Self {
        NestedRveProvider {
            solver,
            materials,
            newton: NewtonOptions::default(),
            perturbation: None,
            warm_start: true,
            cache: Mutex::new(Vec::new()),
        }
    }

    pub fn with_warm_start(mut self, on: bool) -> Self {
        self.warm_start = on;
        self
    }

    /// Last converged micro solution at a point.
    pub fn micro_state(&self, point: usize) -> Option<Arc<MicroSolution>> {
        self.cache.lock().unwrap().get(point).cloned().flatten()
    }
}

impl ConstitutiveProvider for NestedRveProvider {
    fn evaluate(&self, f_bar: &Tensor2, point: usize, _step: usize) -> Result<(Tensor2, Tensor4)> {
        let guess = if self.warm_start {
            self.micro_state(point)
        } else {
            None
        };
        let (sol, a) = self.solver.perturbation_stiffness(
            f_bar,
            &self.materials,
            self.perturbation,
            &self.newton,
            guess.as_deref(),
        )?;
        let p = sol.effective_stress();
        let mut cache = self.cache.lock().unwrap();
        if point >= cache.len() {
            cache.resize(point + 1, None);
        }
        cache[point] = Some(Arc::new(sol));
        Ok((p, a))
    }

    fn name(&self) -> String {
        "fe2".into()
    }

    fn reset(&self, num_points: usize) {
        let mut cache = self.cache.lock().unwrap();
        cache.clear();
        cache.resize(num_points, None);
    }
}

/// Learned constitutive model at fixed material parameters.
pub struct SurrogateProvider {
    pub model: Arc<SurrogateModel>,
    pub material: Vec<f64>,
    extrapolations: AtomicUsize,
}

impl SurrogateProvider {
    pub fn new(model: Arc<SurrogateModel>, material: Vec<f64>) -> Result<Self> {
        if material.len() != model.layout.num_material() {
            return Err(Error::DimensionMismatch {
                expected: model.layout.num_material(),
                got: material.len(),
            });
        }
        Ok(SurrogateProvider {
            model,
            material,
            extrapolations: AtomicUsize::new(0),
        })
    }

    /// Number of calls whose input left the training box.
    pub fn extrapolations(&self) -> usize {
        self.extrapolations.load(Ordering::Relaxed)
    }
}

impl ConstitutiveProvider for SurrogateProvider {
    fn evaluate(&self, f_bar: &Tensor2, _point: usize, _step: usize) -> Result<(Tensor2, Tensor4)> {
        let out = self.model.constitutive_eval(f_bar, &self.material)?;
        if out.extrapolated {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
        }
        Ok(out.value)
    }

    fn name(&self) -> String {
        "surrogate".into()
    }
}
