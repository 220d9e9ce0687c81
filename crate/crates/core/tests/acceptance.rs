//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,4` restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbhomog_core::gpr::GprOptions;
use rbhomog_core::io::MeshSpec;
use rbhomog_core::macro_fem::{
    compare_micro_point, compare_solutions, cooks_membrane, nearest_quadrature_point, solve_macro,
    MacroOptions, MacroSolution, NestedRveProvider, SurrogateProvider,
};
use rbhomog_core::micro_fem::{BoundaryCondition, Mesh, NewtonOptions, RveSolver};
use rbhomog_core::pod::{compute_basis, l2_norm, BasisSelector};
use rbhomog_core::snapshot::{
    generate_snapshots, GenerateOptions, MaterialConfig, ParameterSpace, SnapshotSet,
};
use rbhomog_core::surrogate::{train, SurrogateModel};
use rbhomog_core::tensor_mech::{
    material_tangent, pk1_stress, strain_energy, MaterialParams, Tensor2,
};

type Outcome = Result<(bool, String), String>;

const TEST_SEED: u64 = 20_240_601;
const N_TEST: usize = 200;

fn mat(c1: f64, d1: f64) -> MaterialParams {
    MaterialParams::new(c1, d1).unwrap()
}

struct Dataset {
    train: SnapshotSet,
    test: SnapshotSet,
    train_generation: Duration,
    generation: Duration,
}

fn build_dataset(
    mesh: Arc<Mesh>,
    bc: BoundaryCondition,
    mats: &MaterialConfig,
    space: &ParameterSpace,
    n_train: usize,
    corners: bool,
) -> Dataset {
    let t = Instant::now();
    let solver = RveSolver::new(mesh, bc).unwrap();
    let opts = GenerateOptions::default();
    let train = generate_snapshots(
        &space.sobol(n_train, corners).unwrap(),
        &solver,
        mats,
        &opts,
    )
    .unwrap()
    .set;
    let train_generation = t.elapsed();
    let test = generate_snapshots(
        &space.uniform(N_TEST, TEST_SEED).unwrap(),
        &solver,
        mats,
        &opts,
    )
    .unwrap()
    .set;
    Dataset {
        train,
        test,
        train_generation,
        generation: t.elapsed(),
    }
}

fn porous_mats() -> MaterialConfig {
    MaterialConfig::Fixed {
        phases: vec![mat(1.0, 1.0)],
    }
}

fn fiber_mats() -> MaterialConfig {
    MaterialConfig::Coupled {
        base: vec![mat(1.0, 1.0), mat(100.0, 100.0)],
        phase: 1,
    }
}

fn fiber_space() -> ParameterSpace {
    ParameterSpace {
        stretch_offset: [(-0.3, 0.3); 3],
        material: vec![(50.0, 150.0)],
    }
}

fn porous_data() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        let mesh = Arc::new(MeshSpec::porous(1).build().unwrap());
        build_dataset(
            mesh,
            BoundaryCondition::Linear,
            &porous_mats(),
            &ParameterSpace::cube(0.05),
            50,
            false,
        )
    })
}

fn porous_model() -> &'static (SurrogateModel, Duration) {
    static M: OnceLock<(SurrogateModel, Duration)> = OnceLock::new();
    M.get_or_init(|| {
        let t = Instant::now();
        let m = train(
            &porous_data().train,
            BasisSelector::count(20),
            &GprOptions::default(),
        )
        .unwrap();
        (m, t.elapsed())
    })
}

fn fiber_mesh() -> Arc<Mesh> {
    static M: OnceLock<Arc<Mesh>> = OnceLock::new();
    M.get_or_init(|| Arc::new(MeshSpec::fiber(1).build().unwrap()))
        .clone()
}

/// Fiber cell with linear BCs: 200 training points (corners first), so the
/// 50-point prefix is the small study and the full set feeds the two-scale
/// model.
fn fiber_linear() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        build_dataset(
            fiber_mesh(),
            BoundaryCondition::Linear,
            &fiber_mats(),
            &fiber_space(),
            200,
            true,
        )
    })
}

fn fiber_periodic() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| {
        build_dataset(
            fiber_mesh(),
            BoundaryCondition::Periodic,
            &fiber_mats(),
            &fiber_space(),
            50,
            true,
        )
    })
}

/// Basis size of the two-scale model. Twenty modes leave a projection error
/// above the micro tolerance at the point near the clamped edge.
const TWO_SCALE_MODES: usize = 30;

fn two_scale_model() -> &'static SurrogateModel {
    static M: OnceLock<SurrogateModel> = OnceLock::new();
    M.get_or_init(|| {
        train(
            &fiber_linear().train,
            BasisSelector::count(TWO_SCALE_MODES),
            &GprOptions::default(),
        )
        .unwrap()
    })
}

fn rel(a: &Tensor2, b: &Tensor2) -> f64 {
    (*a - *b).norm() / b.norm()
}

fn random_stretch(rng: &mut ChaCha8Rng, hw: f64) -> Tensor2 {
    Tensor2::symmetric(
        1.0 + rng.random_range(-hw..hw),
        1.0 + rng.random_range(-hw..hw),
        rng.random_range(-hw..hw),
    )
}

fn material_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_p, mut worst_a): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let mu = mat(rng.random_range(0.5..150.0), rng.random_range(0.5..150.0));
        let f = loop {
            let f = Tensor2::new(
                rng.random_range(0.7..1.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(0.7..1.3),
            );
            if f.det() > 0.3 {
                break f;
            }
        };
        let p = pk1_stress(&f, &mu).map_err(|e| e.to_string())?;
        let a = material_tangent(&f, &mu).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let mut fd_p = Tensor2::zeros();
        for k in 0..2 {
            for l in 0..2 {
                let e = Tensor2::unit(k, l) * h;
                let wp = strain_energy(&(f + e), &mu).unwrap();
                let wm = strain_energy(&(f - e), &mu).unwrap();
                fd_p[(k, l)] = (wp - wm) / (2.0 * h);
                let col = (pk1_stress(&(f + e), &mu).unwrap() - pk1_stress(&(f - e), &mu).unwrap())
                    * (0.5 / h);
                worst_a = worst_a.max((a.column(k, l) - col).norm() / a.norm());
            }
        }
        worst_p = worst_p.max(rel(&p, &fd_p));
    }
    let elapsed = t.elapsed().as_secs_f64();
    Ok((
        worst_p < 1e-6 && worst_a < 1e-5 && elapsed < 1.0,
        format!(
            "stress {worst_p:.2e} (< 1e-6), tangent {worst_a:.2e} (< 1e-5), {elapsed:.3} s (< 1 s)"
        ),
    ))
}

fn homogenization_identities() -> Outcome {
    let t = Instant::now();
    let solver =
        RveSolver::new(fiber_mesh(), BoundaryCondition::Linear).map_err(|e| e.to_string())?;
    let newton = NewtonOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_f, mut worst_p): (f64, f64) = (0.0, 0.0);
    for _ in 0..5 {
        let u = random_stretch(&mut rng, 0.3);
        let c = rng.random_range(50.0..150.0);
        let sol = solver
            .solve(&u, &[mat(1.0, 1.0), mat(c, c)], &newton)
            .map_err(|e| e.to_string())?;
        worst_f = worst_f.max((solver.average_deformation(&sol) - u).norm());
        let same = mat(c, c * 0.7);
        let sol = solver
            .solve(&u, &[same, same], &newton)
            .map_err(|e| e.to_string())?;
        worst_p = worst_p.max(rel(
            &sol.effective_stress(),
            &pk1_stress(&u, &same).unwrap(),
        ));
    }
    let elapsed = t.elapsed().as_secs_f64();
    Ok((
        worst_f < 1e-9 && worst_p < 1e-10 && elapsed < 30.0,
        format!("|<F> - U| {worst_f:.2e} (< 1e-9), homogeneous stress {worst_p:.2e} (< 1e-10), {elapsed:.1} s (< 30 s)"),
    ))
}

fn pod_spectrum() -> Outcome {
    let data = porous_data();
    let t = Instant::now();
    let basis = compute_basis(&data.train, BasisSelector::count(20)).map_err(|e| e.to_string())?;
    let ratio = basis.eigenvalues[19] / basis.eigenvalues[0];
    let ortho = basis.orthonormality_error();
    let elapsed = (data.train_generation + t.elapsed()).as_secs_f64();
    Ok((
        ratio < 1e-6 && ortho < 1e-10 && elapsed < 600.0,
        format!("lambda20/lambda1 {ratio:.2e} (< 1e-6), orthonormality {ortho:.2e} (< 1e-10), ~{elapsed:.1} s (< 600 s)"),
    ))
}

fn surrogate_accuracy() -> Outcome {
    let data = porous_data();
    let (model, train_time) = porous_model();
    let t = Instant::now();
    let report = model.evaluate(&data.test).map_err(|e| e.to_string())?;
    let elapsed =
        data.generation.as_secs_f64() + train_time.as_secs_f64() + t.elapsed().as_secs_f64();
    let (mean, max) = (report.mean_stress_error(), report.max_stress_error());
    Ok((
        mean < 0.01 && max < 0.05 && elapsed < 1200.0,
        format!(
            "mean {:.4}% (< 1%), max {:.4}% (< 5%), {elapsed:.1} s (< 1200 s)",
            100.0 * mean,
            100.0 * max
        ),
    ))
}

fn error_decomposition() -> Outcome {
    let data = porous_data();
    let (model, _) = porous_model();
    let (mut worst_id, mut worst_tri): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for (field, params) in data.test.fields.iter().zip(&data.test.params).take(50) {
        let e = model
            .error_decomposition(field, params)
            .map_err(|e| e.to_string())?;
        let exact = model.basis.project(field).map_err(|e| e.to_string())?;
        let pred = model
            .coefficients(&params.values())
            .map_err(|e| e.to_string())?
            .value;
        let delta: Vec<f64> = exact.iter().zip(&pred).map(|(a, b)| a - b).collect();
        let expansion = model.basis.reconstruct(&delta).map_err(|e| e.to_string())?;
        worst_id =
            worst_id.max((e.regression - l2_norm(&expansion.stress, &expansion.weights)).abs());
        worst_tri = worst_tri.max(e.total - e.projection - e.regression);
    }
    Ok((
        worst_id < 1e-10 && worst_tri <= 0.0,
        format!("identity gap {worst_id:.2e} (< 1e-10), max(total - projection - regression) {worst_tri:.2e} (<= 0)"),
    ))
}

fn consistent_tangent() -> Outcome {
    let (model, _) = porous_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-6;
    let (mut worst_a, mut worst_g): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let u = random_stretch(&mut rng, 0.045);
        let a = model
            .effective_stiffness(&u, &[])
            .map_err(|e| e.to_string())?
            .value;
        let x = model.layout.input(&u, &[]).map_err(|e| e.to_string())?;
        for (k, (i, j)) in [(0, (0, 0)), (1, (1, 1)), (2, (0, 1))] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = model
                .effective_stress_difference(&xp, &xm)
                .map_err(|e| e.to_string())?
                * (0.5 / h);
            // the shear parameter drives both off-diagonal entries of F
            let col = if k == 2 {
                a.column(0, 1) + a.column(1, 0)
            } else {
                a.column(i, j)
            };
            worst_a = worst_a.max((col - fd).norm() / fd.norm());
        }
        for gp in &model.regressors {
            let g = gp.predict_gradient(&x).map_err(|e| e.to_string())?;
            let fd: Vec<f64> = (0..x.len())
                .map(|k| {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[k] += h;
                    xm[k] -= h;
                    gp.mean_difference(&xp, &xm).unwrap() / (2.0 * h)
                })
                .collect();
            let diff: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_g = worst_g.max(diff / norm);
        }
    }
    Ok((
        worst_a < 1e-5 && worst_g < 1e-6,
        format!("stiffness {worst_a:.2e} (< 1e-5), regression gradient {worst_g:.2e} (< 1e-6)"),
    ))
}

fn objectivity() -> Outcome {
    let (model, _) = porous_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let u = random_stretch(&mut rng, 0.045);
        let r = Tensor2::rotation(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let base = model
            .effective_stress(&u, &[])
            .map_err(|e| e.to_string())?
            .value;
        let (p, _) = model
            .constitutive_eval(&(r * u), &[])
            .map_err(|e| e.to_string())?
            .value;
        worst = worst.max((p - r * base).norm() / base.norm());
    }
    Ok((
        worst < 1e-8,
        format!("max relative deviation {worst:.2e} (< 1e-8)"),
    ))
}

fn l_sweep() -> Outcome {
    let data = porous_data();
    let (model, _) = porous_model();
    let mut projection = Vec::new();
    let mut lines = Vec::new();
    let mut tracks = true;
    for l in 1..=20 {
        let report = model
            .truncated(l)
            .map_err(|e| e.to_string())?
            .evaluate(&data.test)
            .map_err(|e| e.to_string())?;
        projection.push(report.projection);
        let (rom, proj) = (
            report.mean_stress_error(),
            report.mean_projected_stress_error(),
        );
        if l <= 8 {
            let ratio = rom / proj;
            tracks &= (0.5..=2.0).contains(&ratio);
            lines.push(format!("L={l}: {:.3}%/{:.3}%", 100.0 * rom, 100.0 * proj));
        }
    }
    let monotone = projection.windows(2).all(|w| w[1] <= w[0]);
    Ok((
        monotone && tracks,
        format!("projection error non-increasing: {monotone}; rom/projection within 2x for L<=8: {tracks} [{}]", lines.join(", ")),
    ))
}

struct TwoScale {
    fe2: MacroSolution,
    rom: MacroSolution,
    extrapolations: usize,
    solver: RveSolver,
}

fn two_scale_runs() -> Result<TwoScale, String> {
    let problem = cooks_membrane(4, 0.1, 5).map_err(|e| e.to_string())?;
    let opts = MacroOptions::default();
    let materials = vec![mat(1.0, 1.0), mat(100.0, 100.0)];
    let fe2_provider = NestedRveProvider::new(
        RveSolver::new(fiber_mesh(), BoundaryCondition::Linear).unwrap(),
        materials,
    );
    let fe2 = solve_macro(&problem, &fe2_provider, &opts).map_err(|e| e.to_string())?;
    let surrogate = SurrogateProvider::new(Arc::new(two_scale_model().clone()), vec![100.0])
        .map_err(|e| e.to_string())?;
    let rom = solve_macro(&problem, &surrogate, &opts).map_err(|e| e.to_string())?;
    Ok(TwoScale {
        fe2,
        rom,
        extrapolations: surrogate.extrapolations(),
        solver: fe2_provider.solver,
    })
}

fn two_scale() -> Outcome {
    let problem = cooks_membrane(4, 0.1, 5).map_err(|e| e.to_string())?;
    let runs = two_scale_runs()?;
    let cmp = compare_solutions(&runs.fe2, &runs.rom).map_err(|e| e.to_string())?;
    let macro_err = cmp.max_component(1, 0);
    let mut micro = Vec::new();
    let last = runs.fe2.steps.len() - 1;
    let twenty = two_scale_model().truncated(20).map_err(|e| e.to_string())?;
    let mut micro_twenty = Vec::new();
    for (name, x) in [("A", [4.0, 50.0]), ("B", [36.0, 50.0])] {
        let q = nearest_quadrature_point(&problem, x).map_err(|e| e.to_string())?;
        for (model, out) in [
            (two_scale_model(), &mut micro),
            (&twenty, &mut micro_twenty),
        ] {
            let c = compare_micro_point(
                &runs.fe2,
                last,
                q,
                &runs.solver,
                &[mat(1.0, 1.0), mat(100.0, 100.0)],
                &NewtonOptions::default(),
                model,
                &[100.0],
            )
            .map_err(|e| e.to_string())?;
            out.push((name, c.components[2].max));
        }
    }
    let micro_err = micro.iter().map(|m| m.1).fold(0.0, f64::max);
    let speedup = runs.fe2.wall_time / runs.rom.wall_time;
    let iters = |s: &MacroSolution| s.steps.iter().map(|s| s.iterations).max().unwrap_or(0);
    let pass = macro_err <= 0.02
        && micro_err <= 0.10
        && speedup >= 50.0
        && runs.fe2.wall_time <= 7200.0
        && runs.rom.wall_time <= 60.0
        && iters(&runs.fe2) <= 10;
    Ok((
        pass,
        format!(
            "L = {TWO_SCALE_MODES}: macro P_yx max {:.3}% (<= 2%), micro P_yx max {} (<= 10%; with L = 20: {}), speedup {speedup:.0}x (>= 50x; FE2 {:.1} s, surrogate {:.3} s), Newton iterations per step FE2 {} / surrogate {}, extrapolated calls {}",
            100.0 * macro_err,
            micro.iter().map(|(n, e)| format!("{n} {:.3}%", 100.0 * e)).collect::<Vec<_>>().join(", "),
            micro_twenty.iter().map(|(n, e)| format!("{n} {:.3}%", 100.0 * e)).collect::<Vec<_>>().join(", "),
            runs.fe2.wall_time,
            runs.rom.wall_time,
            iters(&runs.fe2),
            iters(&runs.rom),
            runs.extrapolations,
        ),
    ))
}

fn periodic_parity() -> Outcome {
    let opts = GprOptions::default();
    let lin = fiber_linear();
    let lin_model = train(
        &lin.train.prefix(50).map_err(|e| e.to_string())?,
        BasisSelector::count(20),
        &opts,
    )
    .map_err(|e| e.to_string())?;
    let lin_err = lin_model
        .evaluate(&lin.test)
        .map_err(|e| e.to_string())?
        .mean_stress_error();
    let per = fiber_periodic();
    let per_model =
        train(&per.train, BasisSelector::count(20), &opts).map_err(|e| e.to_string())?;
    let per_err = per_model
        .evaluate(&per.test)
        .map_err(|e| e.to_string())?
        .mean_stress_error();
    let ratio = per_err / lin_err;
    Ok((
        (0.5..=2.0).contains(&ratio),
        format!(
            "mean error periodic {:.4}% vs linear {:.4}%, ratio {ratio:.2} (within 2x)",
            100.0 * per_err,
            100.0 * lin_err
        ),
    ))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "material oracle", material_oracle),
        (2, "homogenization identities", homogenization_identities),
        (3, "POD spectrum", pod_spectrum),
        (4, "surrogate accuracy", surrogate_accuracy),
        (5, "error decomposition", error_decomposition),
        (6, "consistent tangent", consistent_tangent),
        (7, "objectivity", objectivity),
        (8, "L sweep", l_sweep),
        (9, "two-scale Cook's membrane", two_scale),
        (10, "periodic BC parity", periodic_parity),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let (pass, detail) = match outcome {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {name}: {} | {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
