//! Newton solver for the fluctuation field of an RVE driven by a macroscopic
//! deformation gradient.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::element::QuadPoint;
use super::mesh::Mesh;
use crate::error::{Error, Result};
use crate::linalg::{norm2, Factorization, SparsePattern};
use crate::tensor_mech::{pk1_stress, stress_and_tangent, MaterialParams, Tensor2, Tensor4};

const FIXED: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    /// Zero fluctuation on the whole cell boundary.
    Linear,
    /// Periodic fluctuation, corners fixed.
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
    /// Maximum number of load-increment halvings.
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            max_iter: 25,
            max_halvings: 8,
        }
    }
}

impl NewtonOptions {
    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.max_iter > 0) {
            return Err(Error::InvalidInput(format!("bad newton options {self:?}")));
        }
        Ok(())
    }
}

/// PK1 stress at every quadrature point together with the integration weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureStressField {
    /// Row-major `[P11, P12, P21, P22]` per quadrature point, element-major order.
    pub stress: Vec<[f64; 4]>,
    pub weights: Arc<[f64]>,
    /// Cell volume used for averaging (includes pores).
    pub total_volume: f64,
}

impl QuadratureStressField {
    pub fn len(&self) -> usize {
        self.stress.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stress.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stress.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: self.stress.len(),
            });
        }
        if !(self.total_volume > 0.0) || self.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidInput(
                "weights and volume must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn stress_at(&self, q: usize) -> Tensor2 {
        Tensor2::from_array(self.stress[q])
    }
}

/// Volume average `|Ω|⁻¹ Σ w_q P_q`.
pub fn average_stress(field: &QuadratureStressField) -> Tensor2 {
    weighted_average(&field.stress, &field.weights, field.total_volume)
}

fn weighted_average(values: &[[f64; 4]], weights: &[f64], volume: f64) -> Tensor2 {
    let mut acc = [0.0; 4];
    for (p, w) in values.iter().zip(weights) {
        for c in 0..4 {
            acc[c] += w * p[c];
        }
    }
    Tensor2::from_array(acc.map(|v| v / volume))
}

#[derive(Clone, Debug)]
pub struct MicroSolution {
    /// Nodal fluctuation `w`, so that `x = F̄·X + w`.
    pub fluctuation: Vec<[f64; 2]>,
    /// Deformation gradient at every quadrature point.
    pub deformation: Vec<[f64; 4]>,
    pub stress_field: QuadratureStressField,
    pub converged: bool,
    /// Newton iterations summed over all load increments.
    pub newton_iterations: usize,
    /// Number of accepted load increments.
    pub load_steps: usize,
    /// Residual norms of the final load increment.
    pub residual_history: Vec<f64>,
    pub f_bar: Tensor2,
}

impl MicroSolution {
    pub fn effective_stress(&self) -> Tensor2 {
        average_stress(&self.stress_field)
    }
}

struct Assembly {
    residual: Vec<f64>,
    values: Option<Vec<f64>>,
}

struct NewtonFailure {
    iterations: usize,
    residual: f64,
    inverted: Option<f64>,
}

/// Reusable solver for one mesh and boundary condition. Holds no mutable
/// state, so one instance can serve concurrent solves.
pub struct RveSolver {
    mesh: Arc<Mesh>,
    bc: BoundaryCondition,
    quad: Vec<Vec<QuadPoint>>,
    weights: Arc<[f64]>,
    /// Equation number of every local dof, `FIXED` when constrained.
    elem_eq: Vec<Vec<usize>>,
    /// Per element, `m×m` storage positions in the lower triangle (or `FIXED`).
    elem_pos: Vec<Vec<usize>>,
    node_eq: Vec<[usize; 2]>,
    pattern: SparsePattern,
    hole_edges: Vec<(usize, usize)>,
}

impl RveSolver {
    pub fn new(mesh: Arc<Mesh>, bc: BoundaryCondition) -> Result<Self> {
        mesh.validate()?;
        let quad = mesh.quadrature()?;
        let weights: Arc<[f64]> = quad
            .iter()
            .flatten()
            .map(|q| q.weight)
            .collect::<Vec<_>>()
            .into();
        let nn = mesh.num_nodes();

        // node -> node whose equations it uses (itself unless periodic slave)
        let mut owner: Vec<usize> = (0..nn).collect();
        let mut fixed = vec![false; nn];
        match bc {
            BoundaryCondition::Linear => {
                for &b in &mesh.boundary_nodes {
                    fixed[b] = true;
                }
            }
            BoundaryCondition::Periodic => {
                let per = mesh.periodic.as_ref().ok_or_else(|| {
                    Error::InvalidMesh(
                        "periodic boundary condition needs periodic node pairs".into(),
                    )
                })?;
                for &c in &per.corners {
                    fixed[c] = true;
                }
                for &(m, s) in &per.pairs {
                    owner[s] = m;
                }
                // resolve chains (a corner slave may map through an edge)
                for n in 0..nn {
                    let mut o = owner[n];
                    let mut guard = 0;
                    while owner[o] != o {
                        o = owner[o];
                        guard += 1;
                        if guard > 4 {
                            return Err(Error::InvalidMesh("cyclic periodic pairing".into()));
                        }
                    }
                    owner[n] = o;
                }
            }
        }
        let mut node_eq = vec![[FIXED; 2]; nn];
        let mut n_eq = 0;
        for n in 0..nn {
            if owner[n] == n && !fixed[n] {
                node_eq[n] = [n_eq, n_eq + 1];
                n_eq += 2;
            }
        }
        for n in 0..nn {
            if owner[n] != n {
                node_eq[n] = if fixed[owner[n]] || fixed[n] {
                    [FIXED; 2]
                } else {
                    node_eq[owner[n]]
                };
            }
        }
        if n_eq == 0 {
            return Err(Error::InvalidMesh("no free degrees of freedom".into()));
        }

        let elem_eq: Vec<Vec<usize>> = mesh
            .elements
            .iter()
            .map(|conn| conn.iter().flat_map(|&n| node_eq[n]).collect())
            .collect();
        let entries = elem_eq.iter().flat_map(|eqs| {
            eqs.iter()
                .flat_map(move |&r| eqs.iter().map(move |&c| (r, c)))
                .filter(|&(r, c)| r != FIXED && c != FIXED)
        });
        let pattern = SparsePattern::new(n_eq, entries)?;
        let elem_pos = elem_eq
            .iter()
            .map(|eqs| {
                let mut pos = Vec::with_capacity(eqs.len() * eqs.len());
                for &r in eqs {
                    for &c in eqs {
                        pos.push(if r == FIXED || c == FIXED || r < c {
                            FIXED
                        } else {
                            pattern.position(r, c).expect("pattern entry")
                        });
                    }
                }
                pos
            })
            .collect();

        let outer: HashSet<usize> = mesh.boundary_nodes.iter().copied().collect();
        let hole_edges = mesh
            .free_edges()
            .into_iter()
            .filter(|&(e, edge)| {
                mesh.kind
                    .edge_local_nodes(edge)
                    .iter()
                    .any(|&a| !outer.contains(&mesh.elements[e][a]))
            })
            .collect();

        Ok(RveSolver {
            mesh,
            bc,
            quad,
            weights,
            elem_eq,
            elem_pos,
            node_eq,
            pattern,
            hole_edges,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn boundary_condition(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn num_equations(&self) -> usize {
        self.pattern.dim()
    }

    pub fn weights(&self) -> &Arc<[f64]> {
        &self.weights
    }

    fn check_materials(&self, materials: &[MaterialParams]) -> Result<()> {
        if let Some(&p) = self.mesh.phases.iter().max() {
            if p >= materials.len() {
                return Err(Error::InvalidInput(format!(
                    "mesh uses phase {p} but only {} materials were given",
                    materials.len()
                )));
            }
        }
        Ok(())
    }

    fn abs_floor(&self, materials: &[MaterialParams], opts: &NewtonOptions) -> f64 {
        let scale = materials.iter().map(|m| m.c1 + m.d1).fold(0.0, f64::max);
        opts.abs_tol * (1.0 + scale)
    }

    fn element_fluct(&self, e: usize, x: &[f64], out: &mut [[f64; 2]]) {
        for (a, &n) in self.mesh.elements[e].iter().enumerate() {
            let eq = self.node_eq[n];
            out[a] = if eq[0] == FIXED {
                [0.0, 0.0]
            } else {
                [x[eq[0]], x[eq[1]]]
            };
        }
    }

    fn qp_deformation(f_bar: &Tensor2, q: &QuadPoint, w: &[[f64; 2]]) -> Tensor2 {
        let mut f = *f_bar;
        for (g, wa) in q.grad.iter().zip(w) {
            for i in 0..2 {
                for j in 0..2 {
                    f[(i, j)] += wa[i] * g[j];
                }
            }
        }
        f
    }

    fn assemble(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        x: &[f64],
        tangent: bool,
    ) -> Result<Assembly> {
        let m = self.mesh.kind.nodes_per_element();
        let mut residual = vec![0.0; self.pattern.dim()];
        let mut values = tangent.then(|| vec![0.0; self.pattern.nnz()]);
        let mut w = vec![[0.0; 2]; m];
        let mut re = vec![0.0; 2 * m];
        let mut ke = vec![0.0; 4 * m * m];
        let mut t = vec![[[0.0; 2]; 4]; m];
        for e in 0..self.mesh.num_elements() {
            let mat = &materials[self.mesh.phases[e]];
            self.element_fluct(e, x, &mut w);
            re.iter_mut().for_each(|v| *v = 0.0);
            if tangent {
                ke.iter_mut().for_each(|v| *v = 0.0);
            }
            for q in &self.quad[e] {
                let f = Self::qp_deformation(f_bar, q, &w);
                if tangent {
                    let (p, a) = stress_and_tangent(&f, mat)?;
                    for (b, g) in q.grad.iter().enumerate() {
                        for i in 0..2 {
                            re[2 * b + i] += q.weight * (p[(i, 0)] * g[0] + p[(i, 1)] * g[1]);
                        }
                        // t_b[(i,j)][k] = Σ_l A_ijkl g_l
                        for ij in 0..4 {
                            for k in 0..2 {
                                t[b][ij][k] = a.0[(ij, 2 * k)] * g[0] + a.0[(ij, 2 * k + 1)] * g[1];
                            }
                        }
                    }
                    for (ai, ga) in q.grad.iter().enumerate() {
                        for i in 0..2 {
                            let row = (2 * ai + i) * 2 * m;
                            for (b, tb) in t.iter().enumerate() {
                                for k in 0..2 {
                                    ke[row + 2 * b + k] += q.weight
                                        * (ga[0] * tb[2 * i][k] + ga[1] * tb[2 * i + 1][k]);
                                }
                            }
                        }
                    }
                } else {
                    let p = pk1_stress(&f, mat)?;
                    for (b, g) in q.grad.iter().enumerate() {
                        for i in 0..2 {
                            re[2 * b + i] += q.weight * (p[(i, 0)] * g[0] + p[(i, 1)] * g[1]);
                        }
                    }
                }
            }
            let eqs = &self.elem_eq[e];
            for (l, &r) in eqs.iter().enumerate() {
                if r != FIXED {
                    residual[r] += re[l];
                }
            }
            if let Some(vals) = values.as_mut() {
                for (k, &pos) in self.elem_pos[e].iter().enumerate() {
                    if pos != FIXED {
                        vals[pos] += ke[k];
                    }
                }
            }
        }
        Ok(Assembly { residual, values })
    }

    fn min_det(&self, f_bar: &Tensor2, x: &[f64]) -> f64 {
        let m = self.mesh.kind.nodes_per_element();
        let mut w = vec![[0.0; 2]; m];
        let mut out = f64::INFINITY;
        for e in 0..self.mesh.num_elements() {
            self.element_fluct(e, x, &mut w);
            for q in &self.quad[e] {
                out = out.min(Self::qp_deformation(f_bar, q, &w).det());
            }
        }
        out
    }

    /// Full Newton at a fixed macroscopic load, updating `x` in place.
    fn newton(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        x: &mut [f64],
        opts: &NewtonOptions,
        history: &mut Vec<f64>,
    ) -> std::result::Result<(usize, Option<Factorization>), NewtonFailure> {
        history.clear();
        let fail = |iterations, residual, inverted| NewtonFailure {
            iterations,
            residual,
            inverted,
        };
        let zero = vec![0.0; x.len()];
        let reference = match self.assemble(f_bar, materials, &zero, false) {
            Ok(a) => norm2(&a.residual),
            Err(Error::InvertedElement { det }) => return Err(fail(0, f64::NAN, Some(det))),
            Err(_) => return Err(fail(0, f64::NAN, None)),
        };
        let tol = (opts.rel_tol * reference).max(self.abs_floor(materials, opts));
        for it in 0..=opts.max_iter {
            let asm = match self.assemble(f_bar, materials, x, true) {
                Ok(a) => a,
                Err(Error::InvertedElement { det }) => return Err(fail(it, f64::NAN, Some(det))),
                Err(_) => return Err(fail(it, f64::NAN, None)),
            };
            let rn = norm2(&asm.residual);
            history.push(rn);
            if !rn.is_finite() {
                return Err(fail(it, rn, None));
            }
            let values = asm.values.expect("tangent requested");
            if rn <= tol {
                // factorization of the converged tangent, reused for perturbations
                return Ok((it, self.pattern.factorize(&values).ok()));
            }
            if it == opts.max_iter || (it > 3 && rn > 1e6 * (reference + tol)) {
                return Err(fail(it, rn, None));
            }
            let factor = match self.pattern.factorize(&values) {
                Ok(f) => f,
                Err(_) => return Err(fail(it, rn, None)),
            };
            let mut dx: Vec<f64> = asm.residual.iter().map(|r| -r).collect();
            if factor.solve_in_place(&mut dx).is_err() {
                return Err(fail(it, rn, None));
            }
            // backtrack only to keep every element orientation-preserving
            let mut alpha = 1.0;
            let mut trial = vec![0.0; x.len()];
            loop {
                for k in 0..x.len() {
                    trial[k] = x[k] + alpha * dx[k];
                }
                if self.min_det(f_bar, &trial) > 0.0 {
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-4 {
                    return Err(fail(it, rn, Some(self.min_det(f_bar, &trial))));
                }
            }
            x.copy_from_slice(&trial);
        }
        unreachable!("loop returns on its last iteration")
    }

    pub fn solve(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        opts: &NewtonOptions,
    ) -> Result<MicroSolution> {
        self.solve_from(f_bar, materials, opts, None)
    }

    /// Solves with an optional starting fluctuation (e.g. the solution at a
    /// nearby load). Falls back to incremental loading from zero if the
    /// warm start does not converge.
    pub fn solve_from(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        opts: &NewtonOptions,
        guess: Option<&MicroSolution>,
    ) -> Result<MicroSolution> {
        self.solve_inner(f_bar, materials, opts, guess)
            .map(|(s, _, _)| s)
    }

    fn solve_inner(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        opts: &NewtonOptions,
        guess: Option<&MicroSolution>,
    ) -> Result<(MicroSolution, Vec<f64>, Option<Factorization>)> {
        opts.validate()?;
        self.check_materials(materials)?;
        if !f_bar.is_finite() || !(f_bar.det() > 0.0) {
            return Err(Error::InvalidInput(format!(
                "macroscopic deformation must have det > 0, got {:?}",
                f_bar.0
            )));
        }
        let n = self.pattern.dim();
        let mut history = Vec::new();
        let mut total_its = 0;

        if let Some(g) = guess {
            if g.fluctuation.len() == self.mesh.num_nodes() {
                let mut x = self.gather(&g.fluctuation);
                if let Ok((its, factor)) = self.newton(f_bar, materials, &mut x, opts, &mut history)
                {
                    let sol = self.finish(f_bar, materials, &x, its, 1, history.clone())?;
                    return Ok((sol, x, factor));
                }
            }
        }

        let identity = Tensor2::identity();
        let load = |lam: f64| identity + (*f_bar - identity) * lam;
        let mut x = vec![0.0; n];
        let mut lambda: f64 = 0.0;
        let mut dl = 1.0;
        let mut halvings = 0;
        let mut steps = 0;
        loop {
            let target = (lambda + dl).min(1.0);
            let mut trial = x.clone();
            match self.newton(&load(target), materials, &mut trial, opts, &mut history) {
                Ok((its, factor)) => {
                    total_its += its;
                    steps += 1;
                    x = trial;
                    lambda = target;
                    if lambda >= 1.0 {
                        let sol = self.finish(f_bar, materials, &x, total_its, steps, history)?;
                        return Ok((sol, x, factor));
                    }
                }
                Err(failure) => {
                    total_its += failure.iterations;
                    halvings += 1;
                    if halvings > opts.max_halvings {
                        return Err(match failure.inverted {
                            Some(det) if failure.residual.is_nan() => {
                                Error::InvertedElement { det }
                            }
                            _ => Error::Divergence {
                                iterations: total_its,
                                residual: failure.residual,
                                load_factor: target,
                            },
                        });
                    }
                    dl *= 0.5;
                }
            }
        }
    }

    fn gather(&self, nodal: &[[f64; 2]]) -> Vec<f64> {
        let mut x = vec![0.0; self.pattern.dim()];
        for (n, eq) in self.node_eq.iter().enumerate() {
            if eq[0] != FIXED {
                x[eq[0]] = nodal[n][0];
                x[eq[1]] = nodal[n][1];
            }
        }
        x
    }

    fn scatter(&self, x: &[f64]) -> Vec<[f64; 2]> {
        self.node_eq
            .iter()
            .map(|eq| {
                if eq[0] == FIXED {
                    [0.0, 0.0]
                } else {
                    [x[eq[0]], x[eq[1]]]
                }
            })
            .collect()
    }

    fn fields(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        x: &[f64],
    ) -> Result<(Vec<[f64; 4]>, Vec<[f64; 4]>)> {
        let m = self.mesh.kind.nodes_per_element();
        let mut w = vec![[0.0; 2]; m];
        let mut defs = Vec::with_capacity(self.weights.len());
        let mut stresses = Vec::with_capacity(self.weights.len());
        for e in 0..self.mesh.num_elements() {
            self.element_fluct(e, x, &mut w);
            let mat = &materials[self.mesh.phases[e]];
            for q in &self.quad[e] {
                let f = Self::qp_deformation(f_bar, q, &w);
                stresses.push(pk1_stress(&f, mat)?.to_array());
                defs.push(f.to_array());
            }
        }
        Ok((defs, stresses))
    }

    fn finish(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        x: &[f64],
        iterations: usize,
        steps: usize,
        history: Vec<f64>,
    ) -> Result<MicroSolution> {
        let (deformation, stress) = self.fields(f_bar, materials, x)?;
        Ok(MicroSolution {
            fluctuation: self.scatter(x),
            deformation,
            stress_field: QuadratureStressField {
                stress,
                weights: self.weights.clone(),
                total_volume: self.mesh.cell_volume,
            },
            converged: true,
            newton_iterations: iterations,
            load_steps: steps,
            residual_history: history,
            f_bar: *f_bar,
        })
    }

    /// Residual-only evaluation, exposed for consistency checks.
    pub fn residual_norm(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        sol: &MicroSolution,
    ) -> Result<f64> {
        let x = self.gather(&sol.fluctuation);
        Ok(norm2(&self.assemble(f_bar, materials, &x, false)?.residual))
    }

    /// `⟨F⟩` over the whole cell. Pores contribute through the deformed
    /// position of their boundary.
    pub fn average_deformation(&self, sol: &MicroSolution) -> Tensor2 {
        let mut acc = [0.0; 4];
        for (f, w) in sol.deformation.iter().zip(self.weights.iter()) {
            for c in 0..4 {
                acc[c] += w * f[c];
            }
        }
        let kind = self.mesh.kind;
        let gl = [
            (-0.774_596_669_241_483_4, 5.0 / 9.0),
            (0.0, 8.0 / 9.0),
            (0.774_596_669_241_483_4, 5.0 / 9.0),
        ];
        for &(e, edge) in &self.hole_edges {
            let conn = &self.mesh.elements[e];
            let locals = kind.edge_local_nodes(edge);
            for &(s, ws) in &gl {
                let shape = kind.edge_shape(s);
                let mut x = [0.0; 2];
                let mut dxds = [0.0; 2];
                for (&a, &(n, dn)) in locals.iter().zip(&shape) {
                    let node = conn[a];
                    let xr = self.mesh.nodes[node];
                    let u = sol.fluctuation[node];
                    for r in 0..2 {
                        let pos = sol.f_bar[(r, 0)] * xr[0] + sol.f_bar[(r, 1)] * xr[1] + u[r];
                        x[r] += n * pos;
                        dxds[r] += dn * xr[r];
                    }
                }
                // normal out of the pore: (-t_y, t_x) for the element's CCW tangent
                let nh = [-dxds[1], dxds[0]];
                for i in 0..2 {
                    for j in 0..2 {
                        acc[2 * i + j] += ws * x[i] * nh[j];
                    }
                }
            }
        }
        Tensor2::from_array(acc.map(|v| v / self.mesh.cell_volume))
    }

    /// Central-difference effective tangent. Returns the base solution and
    /// `Ā` with `Ā[:, :, k, l] ≈ (P̄(F̄ + h eₖ⊗eₗ) − P̄(F̄ − h eₖ⊗eₗ)) / 2h`.
    pub fn perturbation_stiffness(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        h: Option<f64>,
        opts: &NewtonOptions,
        guess: Option<&MicroSolution>,
    ) -> Result<(MicroSolution, Tensor4)> {
        let h = h.unwrap_or_else(|| default_perturbation(f_bar));
        if !(h > 0.0) {
            return Err(Error::InvalidInput(format!(
                "perturbation step must be positive, got {h}"
            )));
        }
        let (base, x0, factor) = self.solve_inner(f_bar, materials, opts, guess)?;
        let mut a = Tensor4::zeros();
        for k in 0..2 {
            for l in 0..2 {
                let mut col = Tensor2::zeros();
                for sign in [1.0, -1.0] {
                    let fp = *f_bar + Tensor2::unit(k, l) * (sign * h);
                    let p = self
                        .perturbed_stress(&fp, materials, &x0, factor.as_ref(), opts)
                        .map_err(|e| Error::PerturbationFailed {
                            i: k,
                            j: l,
                            source: Box::new(e),
                        })?;
                    col = col + p * sign;
                }
                a.set_column(k, l, &(col * (0.5 / h)));
            }
        }
        Ok((base, a))
    }

    /// Effective stress at a load close to a converged state. Uses the
    /// converged tangent (modified Newton) and drives the residual to the
    /// rounding floor; falls back to a full solve.
    fn perturbed_stress(
        &self,
        f_bar: &Tensor2,
        materials: &[MaterialParams],
        x0: &[f64],
        factor: Option<&Factorization>,
        opts: &NewtonOptions,
    ) -> Result<Tensor2> {
        if let Some(factor) = factor {
            let mut x = x0.to_vec();
            let floor = self.abs_floor(materials, opts);
            let mut prev = f64::INFINITY;
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..30 {
                let r = match self.assemble(f_bar, materials, &x, false) {
                    Ok(a) => a.residual,
                    Err(_) => break,
                };
                let rn = norm2(&r);
                if best.as_ref().is_none_or(|(b, _)| rn < *b) {
                    best = Some((rn, x.clone()));
                }
                if rn <= floor || rn > 0.5 * prev {
                    break;
                }
                prev = rn;
                let mut dx: Vec<f64> = r.iter().map(|v| -v).collect();
                factor.solve_in_place(&mut dx)?;
                for (xi, d) in x.iter_mut().zip(&dx) {
                    *xi += d;
                }
            }
            if let Some((rn, x)) = best {
                let zero = vec![0.0; x.len()];
                let reference = norm2(&self.assemble(f_bar, materials, &zero, false)?.residual);
                if rn <= (opts.rel_tol * reference).max(floor) {
                    let (_, stress) = self.fields(f_bar, materials, &x)?;
                    return Ok(weighted_average(
                        &stress,
                        &self.weights,
                        self.mesh.cell_volume,
                    ));
                }
            }
        }
        let mut tight = *opts;
        tight.rel_tol = opts.rel_tol.min(1e-12);
        let sol = self.solve(f_bar, materials, &tight)?;
        Ok(sol.effective_stress())
    }
}

/// Default central-difference step `1e-6·max(1, ‖F̄‖)`.
pub fn default_perturbation(f_bar: &Tensor2) -> f64 {
    1e-6 * f_bar.norm().max(1.0)
}

/// One-shot convenience wrapper around [`RveSolver`].
pub fn solve_rve(
    mesh: Arc<Mesh>,
    bc: BoundaryCondition,
    f_bar: &Tensor2,
    materials: &[MaterialParams],
    opts: &NewtonOptions,
) -> Result<MicroSolution> {
    RveSolver::new(mesh, bc)?.solve(f_bar, materials, opts)
}

pub fn perturbation_stiffness(
    mesh: Arc<Mesh>,
    bc: BoundaryCondition,
    f_bar: &Tensor2,
    materials: &[MaterialParams],
    h: f64,
) -> Result<Tensor4> {
    let solver = RveSolver::new(mesh, bc)?;
    Ok(solver
        .perturbation_stiffness(f_bar, materials, Some(h), &NewtonOptions::default(), None)?
        .1)
}
