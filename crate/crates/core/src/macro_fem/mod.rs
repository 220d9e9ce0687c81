//! Total-Lagrangian macroscale solver with a pluggable constitutive provider.

mod provider;

pub use provider::{AnalyticProvider, ConstitutiveProvider, NestedRveProvider, SurrogateProvider};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::MeshSpec;
use crate::linalg::{norm2, solve_general};
use crate::micro_fem::{
    ElementKind, Mesh, NewtonOptions, QuadPoint, QuadratureStressField, RveSolver,
};
use crate::surrogate::SurrogateModel;
use crate::tensor_mech::{MaterialParams, Tensor2, Tensor4};

/// Prescribed displacement of one degree of freedom (scaled by the load
/// factor).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletBc {
    pub node: usize,
    pub dof: usize,
    pub value: f64,
}

/// Dead-load traction (force per reference length) on one element edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLoad {
    pub nodes: [usize; 2],
    pub traction: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroProblem {
    pub mesh: Mesh,
    pub dirichlet: Vec<DirichletBc>,
    pub neumann: Vec<EdgeLoad>,
    pub load_steps: usize,
}

impl MacroProblem {
    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        if self.mesh.kind != ElementKind::Quad4 {
            return Err(Error::InvalidMesh("macro meshes must be bilinear".into()));
        }
        if self.dirichlet.is_empty() {
            return Err(Error::InvalidInput(
                "no Dirichlet conditions: rigid body modes are free".into(),
            ));
        }
        if self.load_steps == 0 {
            return Err(Error::InvalidInput("load_steps must be at least 1".into()));
        }
        let nn = self.mesh.num_nodes();
        if let Some(bc) = self.dirichlet.iter().find(|b| b.node >= nn || b.dof > 1) {
            return Err(Error::InvalidInput(format!(
                "Dirichlet condition on node {} dof {} is out of range",
                bc.node, bc.dof
            )));
        }
        if let Some(l) = self
            .neumann
            .iter()
            .find(|l| l.nodes.iter().any(|&n| n >= nn))
        {
            return Err(Error::InvalidInput(format!(
                "edge load on nodes {:?} is out of range",
                l.nodes
            )));
        }
        Ok(())
    }

    pub fn num_quadrature_points(&self) -> usize {
        self.mesh.num_quadrature_points()
    }

    /// External nodal forces at load factor 1.
    fn external_forces(&self) -> Vec<f64> {
        let mut f = vec![0.0; 2 * self.mesh.num_nodes()];
        for l in &self.neumann {
            let [a, b] = l.nodes;
            let (pa, pb) = (self.mesh.nodes[a], self.mesh.nodes[b]);
            let len = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            for n in [a, b] {
                for d in 0..2 {
                    f[2 * n + d] += 0.5 * len * l.traction[d];
                }
            }
        }
        f
    }
}

/// The tapered Cook membrane: left edge clamped, vertical dead-load traction
/// on the right edge applied in `steps` equal increments.
pub fn cooks_membrane(n: usize, traction: f64, steps: usize) -> Result<MacroProblem> {
    let mesh = MeshSpec::Cook { n }.build()?;
    let tol = 1e-9;
    let dirichlet = (0..mesh.num_nodes())
        .filter(|&i| mesh.nodes[i][0].abs() < tol)
        .flat_map(|node| {
            (0..2).map(move |dof| DirichletBc {
                node,
                dof,
                value: 0.0,
            })
        })
        .collect();
    let right = |i: usize| (mesh.nodes[i][0] - 48.0).abs() < tol;
    let mut neumann = Vec::new();
    for conn in &mesh.elements {
        for e in 0..4 {
            let (a, b) = (conn[e], conn[(e + 1) % 4]);
            if right(a) && right(b) {
                neumann.push(EdgeLoad {
                    nodes: [a, b],
                    traction: [0.0, traction],
                });
            }
        }
    }
    let p = MacroProblem {
        mesh,
        dirichlet,
        neumann,
        load_steps: steps,
    };
    p.validate()?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacroOptions {
    /// Residual tolerance relative to the full external load.
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
    /// Looser relative tolerance accepted once the residual stops
    /// contracting, i.e. has reached the provider's evaluation noise.
    pub stagnation_tol: f64,
    /// Number of times a failing increment may be halved.
    pub max_cuts: usize,
}

impl Default for MacroOptions {
    fn default() -> Self {
        MacroOptions {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            max_iter: 20,
            stagnation_tol: 1e-5,
            max_cuts: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub load_factor: f64,
    pub displacement: Vec<[f64; 2]>,
    /// `F̄` per quadrature point (element-major, 4 per element).
    pub deformation: Vec<Tensor2>,
    pub stress: Vec<Tensor2>,
    /// Newton evaluations, including the one that detected convergence,
    /// summed over substeps.
    pub iterations: usize,
    pub substeps: usize,
    pub residual_history: Vec<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroSolution {
    pub provider: String,
    pub steps: Vec<StepResult>,
    pub weights: Vec<f64>,
    pub num_quadrature_points: usize,
    pub constitutive_calls: usize,
    pub wall_time: f64,
}

impl MacroSolution {
    pub fn last(&self) -> &StepResult {
        self.steps.last().expect("a solution has at least one step")
    }
}

struct Assembler<'a> {
    problem: &'a MacroProblem,
    quad: Vec<Vec<QuadPoint>>,
    /// Equation number per dof, `None` if prescribed.
    eq: Vec<Option<usize>>,
    num_eq: usize,
}

impl<'a> Assembler<'a> {
    fn new(problem: &'a MacroProblem) -> Result<Self> {
        let quad = problem.mesh.quadrature()?;
        let mut fixed = vec![false; 2 * problem.mesh.num_nodes()];
        for bc in &problem.dirichlet {
            fixed[2 * bc.node + bc.dof] = true;
        }
        let mut num_eq = 0;
        let eq = fixed
            .iter()
            .map(|&f| {
                if f {
                    None
                } else {
                    num_eq += 1;
                    Some(num_eq - 1)
                }
            })
            .collect();
        Ok(Assembler {
            problem,
            quad,
            eq,
            num_eq,
        })
    }

    fn deformation(&self, u: &[f64]) -> Vec<Tensor2> {
        let mesh = &self.problem.mesh;
        let mut out = Vec::with_capacity(mesh.num_quadrature_points());
        for (conn, qps) in mesh.elements.iter().zip(&self.quad) {
            for q in qps {
                let mut f = Tensor2::identity();
                for (a, &node) in conn.iter().enumerate() {
                    for i in 0..2 {
                        for j in 0..2 {
                            f[(i, j)] += u[2 * node + i] * q.grad[a][j];
                        }
                    }
                }
                out.push(f);
            }
        }
        out
    }

    /// Internal forces, and the tangent on free equations if requested.
    fn assemble(
        &self,
        states: &[(Tensor2, Tensor4)],
        with_tangent: bool,
    ) -> (Vec<f64>, Vec<(usize, usize, f64)>) {
        let mesh = &self.problem.mesh;
        let mut fint = vec![0.0; 2 * mesh.num_nodes()];
        let mut k = Vec::new();
        for (e, (conn, qps)) in mesh.elements.iter().zip(&self.quad).enumerate() {
            for (g, q) in qps.iter().enumerate() {
                let (p, a) = &states[4 * e + g];
                for (na, &node_a) in conn.iter().enumerate() {
                    let ga = q.grad[na];
                    for i in 0..2 {
                        fint[2 * node_a + i] += q.weight * (p[(i, 0)] * ga[0] + p[(i, 1)] * ga[1]);
                    }
                    if !with_tangent {
                        continue;
                    }
                    for (nb, &node_b) in conn.iter().enumerate() {
                        let gb = q.grad[nb];
                        for i in 0..2 {
                            let Some(r) = self.eq[2 * node_a + i] else {
                                continue;
                            };
                            for kk in 0..2 {
                                let Some(c) = self.eq[2 * node_b + kk] else {
                                    continue;
                                };
                                let mut v = 0.0;
                                for j in 0..2 {
                                    for l in 0..2 {
                                        v += ga[j] * a.get(i, j, kk, l) * gb[l];
                                    }
                                }
                                k.push((r, c, q.weight * v));
                            }
                        }
                    }
                }
            }
        }
        (fint, k)
    }
}

fn evaluate_all(
    provider: &dyn ConstitutiveProvider,
    fs: &[Tensor2],
    step: usize,
) -> Result<Vec<(Tensor2, Tensor4)>> {
    let out: Vec<(Tensor2, Tensor4)> = fs
        .par_iter()
        .enumerate()
        .map(|(q, f)| provider.evaluate(f, q, step))
        .collect::<Result<_>>()?;
    if let Some(q) = out
        .iter()
        .position(|(p, a)| !p.is_finite() || !a.is_finite())
    {
        return Err(Error::InvalidInput(format!(
            "provider returned a non-finite state at point {q}"
        )));
    }
    Ok(out)
}

struct Increment {
    u: Vec<f64>,
    fs: Vec<Tensor2>,
    states: Vec<(Tensor2, Tensor4)>,
    iterations: usize,
    history: Vec<f64>,
}

/// Newton solve at one load factor starting from `u0`.
fn newton(
    asm: &Assembler,
    provider: &dyn ConstitutiveProvider,
    u0: &[f64],
    lambda: f64,
    fext: &[f64],
    opts: &MacroOptions,
    step: usize,
    calls: &mut usize,
) -> Result<Increment> {
    let mut u = u0.to_vec();
    for bc in &asm.problem.dirichlet {
        u[2 * bc.node + bc.dof] = lambda * bc.value;
    }
    let load_norm = lambda * norm2(fext);
    let tol = (opts.rel_tol * load_norm).max(opts.abs_tol);
    let mut history = Vec::new();
    for it in 1..=opts.max_iter {
        let fs = asm.deformation(&u);
        if let Some(q) = fs.iter().position(|f| !(f.det() > 0.0)) {
            return Err(Error::InvertedElement { det: fs[q].det() });
        }
        let states = evaluate_all(provider, &fs, step)?;
        *calls += fs.len();
        let (fint, k) = asm.assemble(&states, true);
        let mut r = vec![0.0; asm.num_eq];
        for (dof, e) in asm.eq.iter().enumerate() {
            if let Some(e) = e {
                r[*e] = lambda * fext[dof] - fint[dof];
            }
        }
        let norm = norm2(&r);
        history.push(norm);
        if !norm.is_finite() {
            break;
        }
        let stalled = history.len() > 1 && norm > 0.5 * history[history.len() - 2];
        if norm <= tol || (stalled && norm <= opts.stagnation_tol * load_norm) {
            return Ok(Increment {
                u,
                fs,
                states,
                iterations: it,
                history,
            });
        }
        solve_general(asm.num_eq, &k, &mut r)?;
        for (dof, e) in asm.eq.iter().enumerate() {
            if let Some(e) = e {
                u[dof] += r[*e];
            }
        }
    }
    Err(Error::Divergence {
        iterations: history.len(),
        residual: history.last().copied().unwrap_or(f64::NAN),
        load_factor: lambda,
    })
}

/// Incremental Newton over the problem's load steps. A failing increment is
/// bisected up to `max_cuts` times.
pub fn solve_macro(
    problem: &MacroProblem,
    provider: &dyn ConstitutiveProvider,
    opts: &MacroOptions,
) -> Result<MacroSolution> {
    problem.validate()?;
    let start = Instant::now();
    let asm = Assembler::new(problem)?;
    let fext = problem.external_forces();
    let n_qp = problem.num_quadrature_points();
    provider.reset(n_qp);
    let weights = asm.quad.iter().flatten().map(|q| q.weight).collect();
    let mut u = vec![0.0; 2 * problem.mesh.num_nodes()];
    let mut calls = 0;
    let mut steps = Vec::with_capacity(problem.load_steps);
    let mut lambda_done = 0.0;
    for step in 1..=problem.load_steps {
        let t0 = Instant::now();
        let target = step as f64 / problem.load_steps as f64;
        let mut iterations = 0;
        let mut substeps = 0;
        let mut history = Vec::new();
        let mut dl = target - lambda_done;
        let mut cuts = 0;
        let mut last = None;
        while lambda_done < target {
            let lambda: f64 = if target - lambda_done <= dl * (1.0 + 1e-12) {
                target
            } else {
                lambda_done + dl
            };
            match newton(&asm, provider, &u, lambda, &fext, opts, step, &mut calls) {
                Ok(inc) => {
                    iterations += inc.iterations;
                    substeps += 1;
                    history.extend(inc.history.iter().copied());
                    u.clone_from(&inc.u);
                    lambda_done = lambda;
                    last = Some(inc);
                }
                Err(e) => {
                    if cuts >= opts.max_cuts {
                        return Err(Error::MacroStep {
                            step,
                            source: Box::new(e),
                        });
                    }
                    cuts += 1;
                    dl *= 0.5;
                }
            }
        }
        let inc = last.expect("at least one increment per step");
        steps.push(StepResult {
            load_factor: target,
            displacement: u.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            deformation: inc.fs,
            stress: inc.states.into_iter().map(|(p, _)| p).collect(),
            iterations,
            substeps,
            residual_history: history,
            wall_time: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(MacroSolution {
        provider: provider.name(),
        steps,
        weights,
        num_quadrature_points: n_qp,
        constitutive_calls: calls,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Error of one stress component relative to the mean absolute reference
/// value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub max: f64,
    pub mean: f64,
    /// Point where the maximum occurs.
    pub argmax: usize,
}

/// `ε_q = |a_q − b_q| / ⟨|a|⟩` with the weighted mean `⟨·⟩`.
pub fn field_error(
    reference: &[f64],
    test: &[f64],
    weights: &[f64],
) -> Result<(FieldError, Vec<f64>)> {
    if reference.len() != test.len() || reference.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: test.len(),
        });
    }
    let wsum: f64 = weights.iter().sum();
    let scale = reference
        .iter()
        .zip(weights)
        .map(|(a, w)| a.abs() * w)
        .sum::<f64>()
        / wsum;
    let eps: Vec<f64> = reference
        .iter()
        .zip(test)
        .map(|(a, b)| {
            if scale > 0.0 {
                (a - b).abs() / scale
            } else {
                (a - b).abs()
            }
        })
        .collect();
    let mut summary = FieldError::default();
    for (q, &e) in eps.iter().enumerate() {
        if e > summary.max {
            summary.max = e;
            summary.argmax = q;
        }
    }
    summary.mean = eps.iter().zip(weights).map(|(e, w)| e * w).sum::<f64>() / wsum;
    Ok((summary, eps))
}

/// Component-wise comparison of two macro solutions, per load step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroComparison {
    /// `[step][component]` with components ordered `xx, xy, yx, yy`.
    pub stress: Vec<[FieldError; 4]>,
    pub displacement: Vec<f64>,
}

impl MacroComparison {
    /// Largest error of one component over all steps.
    pub fn max_component(&self, i: usize, j: usize) -> f64 {
        self.stress
            .iter()
            .map(|s| s[2 * i + j].max)
            .fold(0.0, f64::max)
    }
}

pub fn compare_solutions(
    reference: &MacroSolution,
    test: &MacroSolution,
) -> Result<MacroComparison> {
    if reference.steps.len() != test.steps.len()
        || reference.num_quadrature_points != test.num_quadrature_points
    {
        return Err(Error::DimensionMismatch {
            expected: reference.num_quadrature_points,
            got: test.num_quadrature_points,
        });
    }
    let mut stress = Vec::new();
    let mut displacement = Vec::new();
    for (a, b) in reference.steps.iter().zip(&test.steps) {
        let mut comps = [FieldError::default(); 4];
        for (c, comp) in comps.iter_mut().enumerate() {
            let (i, j) = (c / 2, c % 2);
            let ra: Vec<f64> = a.stress.iter().map(|p| p[(i, j)]).collect();
            let rb: Vec<f64> = b.stress.iter().map(|p| p[(i, j)]).collect();
            *comp = field_error(&ra, &rb, &reference.weights)?.0;
        }
        stress.push(comps);
        let du = a
            .displacement
            .iter()
            .zip(&b.displacement)
            .map(|(x, y)| (x[0] - y[0]).hypot(x[1] - y[1]))
            .fold(0.0, f64::max);
        let umax = a
            .displacement
            .iter()
            .map(|x| x[0].hypot(x[1]))
            .fold(0.0, f64::max);
        displacement.push(if umax > 0.0 { du / umax } else { du });
    }
    Ok(MacroComparison {
        stress,
        displacement,
    })
}

/// Comparison of one component of two microscopic stress fields.
pub fn micro_field_error(
    reference: &QuadratureStressField,
    test: &QuadratureStressField,
    i: usize,
    j: usize,
) -> Result<(FieldError, Vec<f64>)> {
    let c = 2 * i + j;
    let a: Vec<f64> = reference.stress.iter().map(|s| s[c]).collect();
    let b: Vec<f64> = test.stress.iter().map(|s| s[c]).collect();
    field_error(&a, &b, &reference.weights)
}

/// Microscopic stress fields at one macro point: RVE re-solve against the
/// surrogate reconstruction, per stress component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroComparison {
    pub point: usize,
    pub step: usize,
    pub f_bar: Tensor2,
    pub components: [FieldError; 4],
    pub extrapolated: bool,
}

pub fn compare_micro_point(
    reference: &MacroSolution,
    step: usize,
    point: usize,
    solver: &RveSolver,
    materials: &[MaterialParams],
    newton: &NewtonOptions,
    model: &SurrogateModel,
    mu: &[f64],
) -> Result<MicroComparison> {
    let s = reference
        .steps
        .get(step)
        .ok_or_else(|| Error::InvalidInput(format!("no load step {step}")))?;
    let f_bar = *s
        .deformation
        .get(point)
        .ok_or_else(|| Error::InvalidInput(format!("no macro point {point}")))?;
    let hf = solver.solve(&f_bar, materials, newton)?;
    let rom = model.rotated_stress_field(&f_bar, mu)?;
    let mut components = [FieldError::default(); 4];
    for (c, comp) in components.iter_mut().enumerate() {
        *comp = micro_field_error(&hf.stress_field, &rom.value, c / 2, c % 2)?.0;
    }
    Ok(MicroComparison {
        point,
        step,
        f_bar,
        components,
        extrapolated: rom.extrapolated,
    })
}

/// Macro quadrature point nearest to a location.
pub fn nearest_quadrature_point(problem: &MacroProblem, x: [f64; 2]) -> Result<usize> {
    let quad = problem.mesh.quadrature()?;
    let (best, _) =
        quad.iter()
            .flatten()
            .enumerate()
            .fold((0, f64::INFINITY), |(bq, bd), (q, p)| {
                let d = (p.x[0] - x[0]).hypot(p.x[1] - x[1]);
                if d < bd {
                    (q, d)
                } else {
                    (bq, bd)
                }
            });
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cook_problem_layout() {
        let p = cooks_membrane(2, 0.1, 5).unwrap();
        assert_eq!(p.mesh.num_elements(), 8);
        assert_eq!(cooks_membrane(10, 0.1, 5).unwrap().mesh.num_elements(), 200);
        let f = p.external_forces();
        let total: f64 = f.iter().skip(1).step_by(2).sum();
        assert!((total - 0.1 * 16.0).abs() < 1e-12);
        assert!(f.iter().step_by(2).all(|v| *v == 0.0));
        // increments of 0.02
        assert!((0.1 * 1.0 / p.load_steps as f64 - 0.02).abs() < 1e-15);
        assert!(p.dirichlet.iter().all(|b| p.mesh.nodes[b.node][0] == 0.0));
        assert_eq!(p.dirichlet.len(), 2 * 3);
    }

    #[test]
    fn field_error_of_identical_fields_is_zero() {
        let (e, eps) = field_error(&[1.0, -2.0, 3.0], &[1.0, -2.0, 3.0], &[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(e.max, 0.0);
        assert!(eps.iter().all(|v| *v == 0.0));
        let (e, _) = field_error(&[1.0, -1.0], &[1.5, -1.0], &[1.0, 1.0]).unwrap();
        assert!((e.max - 0.5).abs() < 1e-15);
        assert!((e.mean - 0.25).abs() < 1e-15);
    }
}
