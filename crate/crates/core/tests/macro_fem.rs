use std::sync::Arc;

use rbhomog_core::gpr::GprOptions;
use rbhomog_core::io::MeshSpec;
use rbhomog_core::macro_fem::{
    compare_solutions, cooks_membrane, solve_macro, AnalyticProvider, ConstitutiveProvider,
    DirichletBc, EdgeLoad, MacroOptions, MacroProblem, MacroSolution, NestedRveProvider,
    SurrogateProvider,
};
use rbhomog_core::micro_fem::{BoundaryCondition, RveSolver};
use rbhomog_core::pod::BasisSelector;
use rbhomog_core::snapshot::{generate_snapshots, GenerateOptions, MaterialConfig, ParameterSpace};
use rbhomog_core::surrogate::train;
use rbhomog_core::tensor_mech::MaterialParams;
use rbhomog_core::Error;

fn mat(c1: f64, d1: f64) -> MaterialParams {
    MaterialParams::new(c1, d1).unwrap()
}

/// Unit square element, roller supports on the left and bottom edges, x
/// traction on the right edge.
fn uniaxial_patch(traction: f64, steps: usize) -> MacroProblem {
    let mesh = MeshSpec::UnitSquare { n: 1 }.build().unwrap();
    let at = |x: f64, y: f64| {
        mesh.nodes
            .iter()
            .position(|p| p[0] == x && p[1] == y)
            .unwrap()
    };
    let (n00, n10, n11, n01) = (at(0.0, 0.0), at(1.0, 0.0), at(1.0, 1.0), at(0.0, 1.0));
    let bc = |node, dof| DirichletBc {
        node,
        dof,
        value: 0.0,
    };
    MacroProblem {
        dirichlet: vec![bc(n00, 0), bc(n00, 1), bc(n01, 0), bc(n10, 1)],
        neumann: vec![EdgeLoad {
            nodes: [n10, n11],
            traction: [traction, 0.0],
        }],
        load_steps: steps,
        mesh,
    }
}

/// Stretches `(a, b)` of the plane-strain Neo-Hookean law under uniaxial
/// nominal stress `t`, by Newton on the two diagonal stress equations.
fn uniaxial_oracle(c1: f64, d1: f64, t: f64) -> (f64, f64) {
    let res = |a: f64, b: f64| {
        let j = a * b;
        (
            2.0 * c1 * (a - 1.0 / a) + 2.0 * d1 * j * (j - 1.0) / a - t,
            2.0 * c1 * (b - 1.0 / b) + 2.0 * d1 * j * (j - 1.0) / b,
        )
    };
    let (mut a, mut b) = (1.0, 1.0);
    for _ in 0..60 {
        let (r1, r2) = res(a, b);
        let h = 1e-7;
        let (r1a, r2a) = res(a + h, b);
        let (r1b, r2b) = res(a, b + h);
        let (j11, j21, j12, j22) = (
            (r1a - r1) / h,
            (r2a - r2) / h,
            (r1b - r1) / h,
            (r2b - r2) / h,
        );
        let det = j11 * j22 - j12 * j21;
        a -= (j22 * r1 - j12 * r2) / det;
        b -= (-j21 * r1 + j11 * r2) / det;
    }
    let (r1, r2) = res(a, b);
    assert!(r1.abs() < 1e-13 && r2.abs() < 1e-13);
    (a, b)
}

fn displacement_error(a: &MacroSolution, b: &MacroSolution) -> f64 {
    let (ua, ub) = (&a.last().displacement, &b.last().displacement);
    let diff = ua
        .iter()
        .zip(ub)
        .map(|(x, y)| (x[0] - y[0]).hypot(x[1] - y[1]))
        .fold(0.0, f64::max);
    diff / ua.iter().map(|x| x[0].hypot(x[1])).fold(0.0, f64::max)
}

#[test]
fn zero_load_converges_immediately() {
    let p = cooks_membrane(2, 0.0, 1).unwrap();
    let provider = AnalyticProvider {
        material: mat(1.0, 1.0),
    };
    let sol = solve_macro(&p, &provider, &MacroOptions::default()).unwrap();
    assert_eq!(sol.steps[0].iterations, 1);
    assert!(sol.last().displacement.iter().flatten().all(|u| *u == 0.0));
}

#[test]
fn uniaxial_patch_matches_closed_form() {
    let (c1, d1, t) = (1.3, 0.8, 0.4);
    let provider = AnalyticProvider {
        material: mat(c1, d1),
    };
    let sol = solve_macro(&uniaxial_patch(t, 4), &provider, &MacroOptions::default()).unwrap();
    let (a, b) = uniaxial_oracle(c1, d1, t);
    for f in &sol.last().deformation {
        assert!((f[(0, 0)] - a).abs() < 1e-8 * a);
        assert!((f[(1, 1)] - b).abs() < 1e-8 * b);
        assert!(f[(0, 1)].abs() < 1e-10 && f[(1, 0)].abs() < 1e-10);
    }
    for p in &sol.last().stress {
        assert!((p[(0, 0)] - t).abs() < 1e-8 * t);
    }
    // Newton converges quadratically with the exact tangent
    assert!(
        sol.steps.iter().all(|s| s.iterations <= 6),
        "{:?}",
        sol.steps.iter().map(|s| s.iterations).collect::<Vec<_>>()
    );
}

#[test]
fn call_count_is_iterations_times_points() {
    let p = cooks_membrane(2, 0.05, 3).unwrap();
    let provider = AnalyticProvider {
        material: mat(1.0, 1.0),
    };
    let sol = solve_macro(&p, &provider, &MacroOptions::default()).unwrap();
    let iters: usize = sol.steps.iter().map(|s| s.iterations).sum();
    assert_eq!(sol.num_quadrature_points, 32);
    assert_eq!(sol.constitutive_calls, iters * 32);
    for s in &sol.steps {
        let last = *s.residual_history.last().unwrap();
        assert!(last <= 1e-8 * 0.05 * 16.0 * s.load_factor.max(1e-300) * 4.0);
    }
}

#[test]
fn cook_steps_are_equal_increments() {
    let p = cooks_membrane(2, 0.1, 5).unwrap();
    let provider = AnalyticProvider {
        material: mat(1.0, 1.0),
    };
    let sol = solve_macro(&p, &provider, &MacroOptions::default()).unwrap();
    let factors: Vec<f64> = sol.steps.iter().map(|s| 0.1 * s.load_factor).collect();
    for (k, f) in factors.iter().enumerate() {
        assert!((f - 0.02 * (k + 1) as f64).abs() < 1e-15);
    }
    let tip = p
        .mesh
        .nodes
        .iter()
        .position(|x| x[0] == 48.0 && x[1] == 60.0)
        .unwrap();
    let uy: Vec<f64> = sol.steps.iter().map(|s| s.displacement[tip][1]).collect();
    assert!(uy.windows(2).all(|w| w[1] > w[0]) && uy[0] > 0.0);
}

#[test]
fn self_comparison_is_zero() {
    let p = cooks_membrane(1, 0.05, 2).unwrap();
    let sol = solve_macro(
        &p,
        &AnalyticProvider {
            material: mat(1.0, 1.0),
        },
        &MacroOptions::default(),
    )
    .unwrap();
    let cmp = compare_solutions(&sol, &sol).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert_eq!(cmp.max_component(i, j), 0.0);
        }
    }
    assert!(cmp.displacement.iter().all(|d| *d == 0.0));
    let other = solve_macro(
        &cooks_membrane(2, 0.05, 2).unwrap(),
        &AnalyticProvider {
            material: mat(1.0, 1.0),
        },
        &MacroOptions::default(),
    )
    .unwrap();
    assert!(matches!(
        compare_solutions(&sol, &other),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn problem_validation() {
    let mut p = cooks_membrane(1, 0.1, 1).unwrap();
    p.dirichlet.clear();
    assert!(solve_macro(
        &p,
        &AnalyticProvider {
            material: mat(1.0, 1.0)
        },
        &MacroOptions::default()
    )
    .is_err());
    let mut p = cooks_membrane(1, 0.1, 1).unwrap();
    p.load_steps = 0;
    assert!(p.validate().is_err());
    assert!(cooks_membrane(0, 0.1, 1).is_err());
}

#[test]
fn excessive_load_reports_the_failing_step() {
    let p = cooks_membrane(1, 50.0, 1).unwrap();
    let opts = MacroOptions {
        max_cuts: 1,
        max_iter: 5,
        ..MacroOptions::default()
    };
    match solve_macro(
        &p,
        &AnalyticProvider {
            material: mat(1.0, 1.0),
        },
        &opts,
    ) {
        Err(Error::MacroStep { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a step failure, got {other:?}"),
    }
}

fn homogeneous_fe2(mu: MaterialParams) -> NestedRveProvider {
    let mesh = Arc::new(MeshSpec::UnitSquare { n: 2 }.build().unwrap());
    NestedRveProvider::new(
        RveSolver::new(mesh, BoundaryCondition::Linear).unwrap(),
        vec![mu],
    )
}

#[test]
fn homogeneous_fe2_equals_analytic() {
    let mu = mat(1.0, 1.0);
    let p = cooks_membrane(1, 0.1, 2).unwrap();
    let opts = MacroOptions::default();
    let reference = solve_macro(&p, &AnalyticProvider { material: mu }, &opts).unwrap();
    let fe2 = solve_macro(&p, &homogeneous_fe2(mu), &opts).unwrap();
    assert!(displacement_error(&reference, &fe2) < 1e-6);
    let cmp = compare_solutions(&reference, &fe2).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!(cmp.max_component(i, j) < 1e-6);
        }
    }
}

#[test]
fn warm_start_does_not_change_results() {
    let mesh = Arc::new(MeshSpec::porous(1).build().unwrap());
    let solver = || RveSolver::new(mesh.clone(), BoundaryCondition::Linear).unwrap();
    let p = cooks_membrane(1, 0.01, 2).unwrap();
    let opts = MacroOptions::default();
    let warm = NestedRveProvider::new(solver(), vec![mat(1.0, 1.0)]);
    let cold = NestedRveProvider::new(solver(), vec![mat(1.0, 1.0)]).with_warm_start(false);
    let a = solve_macro(&p, &warm, &opts).unwrap();
    let b = solve_macro(&p, &cold, &opts).unwrap();
    assert!(displacement_error(&a, &b) < 1e-7);
    let cmp = compare_solutions(&a, &b).unwrap();
    assert!(cmp.max_component(1, 0) < 1e-7);
    assert!(warm.micro_state(0).is_some());
}

#[test]
fn surrogate_of_homogeneous_cell_matches_analytic() {
    let mu = mat(1.0, 1.0);
    let mesh = Arc::new(MeshSpec::UnitSquare { n: 2 }.build().unwrap());
    let solver = RveSolver::new(mesh, BoundaryCondition::Linear).unwrap();
    let mats = MaterialConfig::Fixed { phases: vec![mu] };
    let pts = ParameterSpace::cube(0.05).sobol(30, false).unwrap();
    let set = generate_snapshots(&pts, &solver, &mats, &GenerateOptions::default())
        .unwrap()
        .set;
    let model = Arc::new(train(&set, BasisSelector::count(4), &GprOptions::default()).unwrap());
    let provider = SurrogateProvider::new(model.clone(), vec![]).unwrap();
    assert!(SurrogateProvider::new(model, vec![1.0]).is_err());

    let p = cooks_membrane(2, 0.004, 2).unwrap();
    let opts = MacroOptions::default();
    let reference = solve_macro(&p, &AnalyticProvider { material: mu }, &opts).unwrap();
    let rom = solve_macro(&p, &provider, &opts).unwrap();
    assert_eq!(provider.extrapolations(), 0);
    assert_eq!(rom.provider, provider.name());
    let err = displacement_error(&reference, &rom);
    assert!(err < 0.01, "relative displacement error {err}");
}
