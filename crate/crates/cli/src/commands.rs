use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rbhomog_core::io::{save_mesh, write_vtk, CellField, PointField, Table};
use rbhomog_core::macro_fem::{
    compare_micro_point, compare_solutions, cooks_membrane, nearest_quadrature_point, solve_macro,
    MacroProblem, MacroSolution, NestedRveProvider, SurrogateProvider,
};
use rbhomog_core::micro_fem::RveSolver;
use rbhomog_core::snapshot::{
    generate_snapshots, load_snapshots_for_mesh, save_snapshots, GenerateOptions, SnapshotSet,
};
use rbhomog_core::surrogate::{load_model_for_mesh, save_model, train_split, SurrogateModel};

use crate::config::{Resolved, TwoScaleMode};
use crate::manifest::{Manifest, Outputs};
use crate::CliError;

pub struct Context {
    pub cfg: Resolved,
    pub force: bool,
}

const MESH: &str = "mesh.json";
const TRAIN: &str = "train.snap";
const TEST: &str = "test.snap";
const MODEL: &str = "model.bin";
const FE2: &str = "fe2.json";
const ROM: &str = "surrogate.json";

fn dir(ctx: &Context) -> &Path {
    &ctx.cfg.output
}

fn json_out<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn json_in<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn check_data(ctx: &Context, m: &Manifest) -> Result<(), CliError> {
    if ctx.force {
        return Ok(());
    }
    Manifest::check(&m.data_hash, &ctx.cfg.data_hash(), "snapshot data")
}

fn load_set(ctx: &Context, m: &Manifest, name: &str) -> Result<SnapshotSet, CliError> {
    if !ctx.force {
        m.verify(dir(ctx), name)?;
    }
    Ok(load_snapshots_for_mesh(
        &dir(ctx).join(name),
        &ctx.cfg.mesh.hash(),
    )?)
}

fn model_path(ctx: &Context) -> PathBuf {
    ctx.cfg
        .raw
        .twoscale
        .model
        .clone()
        .unwrap_or_else(|| dir(ctx).join(MODEL))
}

fn load_trained(ctx: &Context, m: &Manifest) -> Result<SurrogateModel, CliError> {
    let path = model_path(ctx);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "model archive {} not found; run `train` first",
            path.display()
        )));
    }
    if !ctx.force && ctx.cfg.raw.twoscale.model.is_none() {
        Manifest::check(&m.training_hash, &ctx.cfg.training_hash(), "model")?;
        m.verify(dir(ctx), MODEL)?;
    }
    Ok(load_model_for_mesh(&path, &ctx.cfg.mesh.hash())?)
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let out = dir(ctx);
    let mut manifest = Manifest::load(out)?;
    if !ctx.force
        && out.join(TRAIN).exists()
        && manifest.data_hash.as_deref() != Some(&cfg.data_hash())
    {
        return Err(CliError::Config(format!(
            "{} holds snapshots of a different configuration (use --force to overwrite)",
            out.display()
        )));
    }
    let solver = RveSolver::new(cfg.mesh.clone(), cfg.boundary)?;
    let opts = GenerateOptions {
        newton: cfg.newton(),
        workers: cfg.workers,
        skip_failures: false,
    };
    let mut files = Outputs::new(out);
    save_mesh(&cfg.mesh, &files.path(MESH))?;
    let t = Instant::now();
    let train_pts = cfg.space.sobol(cfg.n_train, cfg.corners)?;
    let train = generate_snapshots(&train_pts, &solver, &cfg.materials, &opts)?.set;
    save_snapshots(&train, &files.path(TRAIN))?;
    let train_time = t.elapsed().as_secs_f64();
    let t = Instant::now();
    if cfg.n_test > 0 {
        let test_pts = cfg.space.uniform(cfg.n_test, cfg.seed)?;
        let test = generate_snapshots(&test_pts, &solver, &cfg.materials, &opts)?.set;
        save_snapshots(&test, &files.path(TEST))?;
    }
    let test_time = t.elapsed().as_secs_f64();

    let mut points = Table::new(&["set", "index", "U11", "U22", "U12"]);
    points
        .header
        .extend((0..cfg.space.material.len()).map(|k| format!("mu{k}")));
    for (k, p) in train.params.iter().enumerate() {
        let mut row = vec!["train".to_string(), k.to_string()];
        row.extend(p.values().iter().map(|v| v.to_string()));
        points.push(row)?;
    }
    points.write(&files.path("train_points.csv"))?;

    manifest.mesh_hash = Some(cfg.mesh.hash_hex());
    manifest.data_hash = Some(cfg.data_hash());
    manifest.training_hash = None;
    manifest.files.retain(|k, _| k == MESH);
    for name in [MESH, TRAIN, "train_points.csv"] {
        manifest.record(out, name)?;
    }
    if cfg.n_test > 0 {
        manifest.record(out, TEST)?;
    }
    manifest.save(out)?;
    files.commit();
    println!(
        "generated {} training snapshots ({train_time:.1} s) and {} test snapshots ({test_time:.1} s) in {}",
        cfg.n_train,
        cfg.n_test,
        out.display()
    );
    Ok(())
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let out = dir(ctx);
    let mut manifest = Manifest::load(out)?;
    check_data(ctx, &manifest)?;
    let set = load_set(ctx, &manifest, TRAIN)?;
    let t = Instant::now();
    let model = train_split(
        &set.prefix(cfg.n_pod)?,
        &set.prefix(cfg.n_reg)?,
        cfg.selector,
        &cfg.raw.training.gpr,
    )?;
    let elapsed = t.elapsed().as_secs_f64();

    let mut files = Outputs::new(out);
    save_model(&model, &files.path(MODEL))?;
    let eig = &model.basis.eigenvalues;
    let total: f64 = eig.iter().sum();
    let mut spectrum = Table::new(&["mode", "eigenvalue", "relative", "energy"]);
    let mut acc = 0.0;
    for (k, v) in eig.iter().enumerate() {
        acc += v;
        spectrum.push([
            (k + 1).to_string(),
            v.to_string(),
            (v / eig[0]).to_string(),
            (acc / total).to_string(),
        ])?;
    }
    spectrum.write(&files.path("spectrum.csv"))?;
    let report = serde_json::json!({
        "n_pod": cfg.n_pod,
        "n_reg": cfg.n_reg,
        "basis_size": model.len(),
        "energy_captured": model.basis.energy_captured,
        "orthonormality_error": model.basis.orthonormality_error(),
        "training_seconds": elapsed,
        "regressors": model.regressors.iter().map(|r| serde_json::json!({
            "sigma_f": r.kernel.sigma_f,
            "lengthscales": r.kernel.lengthscales,
            "log_likelihood": r.log_likelihood,
            "jitter": r.jitter,
        })).collect::<Vec<_>>(),
    });
    json_out(&files.path("training.json"), &report)?;
    manifest.training_hash = Some(cfg.training_hash());
    for name in [MODEL, "spectrum.csv", "training.json"] {
        manifest.record(out, name)?;
    }
    manifest.save(out)?;
    files.commit();
    println!(
        "trained L = {} (energy {:.6}%) from N_pod = {}, N_reg = {} in {elapsed:.1} s",
        model.len(),
        100.0 * model.basis.energy_captured,
        cfg.n_pod,
        cfg.n_reg
    );
    Ok(())
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let out = dir(ctx);
    let mut manifest = Manifest::load(out)?;
    check_data(ctx, &manifest)?;
    let model = load_trained(ctx, &manifest)?;
    let test = load_set(ctx, &manifest, TEST)?;
    if test.param_dim() != model.layout.dim() {
        return Err(CliError::Config(format!(
            "test points have {} parameters, the model expects {}",
            test.param_dim(),
            model.layout.dim()
        )));
    }
    let report = model.evaluate(&test)?;
    let mut files = Outputs::new(out);

    let mut errors = Table::new(&["index"]);
    errors.header.extend(model.layout.names.iter().cloned());
    errors.header.extend(
        [
            "total",
            "projection",
            "regression",
            "field_norm",
            "stress_error",
            "projected_stress_error",
        ]
        .map(String::from),
    );
    for (k, e) in report.per_snapshot.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(e.params.values().iter().map(|v| v.to_string()));
        row.extend(
            [
                e.total,
                e.projection,
                e.regression,
                e.field_norm,
                e.stress_error,
                e.projected_stress_error,
            ]
            .map(|v| v.to_string()),
        );
        errors.push(row)?;
    }
    errors.write(&files.path("errors.csv"))?;

    let mut sweep = Table::new(&[
        "L",
        "mean_projection",
        "mean_regression",
        "mean_total",
        "mean_stress_error",
        "max_stress_error",
        "mean_projected_stress_error",
        "max_projected_stress_error",
    ]);
    for l in 1..=model.len() {
        let r = if l == model.len() {
            report.clone()
        } else {
            model.truncated(l)?.evaluate(&test)?
        };
        sweep.push([
            l as f64,
            r.projection,
            r.regression,
            r.total,
            r.mean_stress_error(),
            r.max_stress_error(),
            r.mean_projected_stress_error(),
            r.max_projected_stress_error(),
        ])?;
    }
    sweep.write(&files.path("sweep.csv"))?;
    let summary = serde_json::json!({
        "test_points": test.len(),
        "basis_size": model.len(),
        "mean_stress_error": report.mean_stress_error(),
        "max_stress_error": report.max_stress_error(),
        "mean_projected_stress_error": report.mean_projected_stress_error(),
        "mean_projection_error": report.projection,
        "mean_regression_error": report.regression,
    });
    json_out(&files.path("evaluation.json"), &summary)?;
    for name in ["errors.csv", "sweep.csv", "evaluation.json"] {
        manifest.record(out, name)?;
    }
    manifest.save(out)?;
    files.commit();
    println!(
        "effective stress error over {} test points: mean {:.4}%, max {:.4}% (projection bound: mean {:.4}%)",
        test.len(),
        100.0 * report.mean_stress_error(),
        100.0 * report.max_stress_error(),
        100.0 * report.mean_projected_stress_error()
    );
    Ok(())
}

fn macro_problem(ctx: &Context) -> Result<MacroProblem, CliError> {
    let t = &ctx.cfg.raw.twoscale;
    Ok(cooks_membrane(t.cook_n, t.traction, t.steps)?)
}

fn fe2_run(ctx: &Context, problem: &MacroProblem) -> Result<(MacroSolution, RveSolver), CliError> {
    let cfg = &ctx.cfg;
    let mats = cfg.materials.materials(&cfg.twoscale_material)?;
    let mut provider =
        NestedRveProvider::new(RveSolver::new(cfg.mesh.clone(), cfg.boundary)?, mats)
            .with_warm_start(cfg.raw.twoscale.warm_start);
    provider.newton = cfg.newton();
    let sol = solve_macro(problem, &provider, &cfg.raw.twoscale.newton)?;
    Ok((sol, provider.solver))
}

fn stress_rows(sol: &MacroSolution) -> Vec<[f64; 4]> {
    sol.last().stress.iter().map(|p| p.to_array()).collect()
}

pub fn twoscale(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let out = dir(ctx);
    let mut manifest = Manifest::load(out)?;
    let mode = cfg.raw.twoscale.mode;
    let model = match mode {
        TwoScaleMode::Fe2 => None,
        _ => Some(Arc::new(load_trained(ctx, &manifest)?)),
    };
    let problem = macro_problem(ctx)?;
    let mut files = Outputs::new(out);

    let mut solver = None;
    let fe2 = match mode {
        TwoScaleMode::Surrogate => {
            let path = out.join(FE2);
            if path.exists() {
                Some(json_in::<MacroSolution>(&path)?)
            } else {
                None
            }
        }
        _ => {
            let (sol, s) = fe2_run(ctx, &problem)?;
            json_out(&files.path(FE2), &sol)?;
            solver = Some(s);
            println!(
                "FE2 reference: {:.1} s, {} RVE solves",
                sol.wall_time, sol.constitutive_calls
            );
            Some(sol)
        }
    };
    let rom = match &model {
        Some(m) => {
            let provider = SurrogateProvider::new(m.clone(), cfg.twoscale_material.clone())?;
            let sol = solve_macro(&problem, &provider, &cfg.raw.twoscale.newton)?;
            json_out(&files.path(ROM), &sol)?;
            println!(
                "surrogate run: {:.3} s, {} evaluations, {} outside the training box",
                sol.wall_time,
                sol.constitutive_calls,
                provider.extrapolations()
            );
            Some(sol)
        }
        None => None,
    };

    let mut timing = Table::new(&[
        "provider",
        "wall_time",
        "constitutive_calls",
        "newton_iterations",
        "speedup",
    ]);
    for sol in fe2.iter().chain(rom.iter()) {
        let speedup = match (&fe2, &rom) {
            (Some(a), Some(b)) if sol.provider == b.provider => a.wall_time / b.wall_time,
            _ => 1.0,
        };
        let iters: usize = sol.steps.iter().map(|s| s.iterations).sum();
        timing.push([
            sol.provider.clone(),
            sol.wall_time.to_string(),
            sol.constitutive_calls.to_string(),
            iters.to_string(),
            speedup.to_string(),
        ])?;
    }
    timing.write(&files.path("timing.csv"))?;

    let mut cells = Vec::new();
    let mut written = vec!["timing.csv".to_string()];
    if let (Some(a), Some(b)) = (&fe2, &rom) {
        let cmp = compare_solutions(a, b)?;
        let mut table = Table::new(&["step", "component", "max_error", "mean_error"]);
        for (k, step) in cmp.stress.iter().enumerate() {
            for (c, name) in ["xx", "xy", "yx", "yy"].iter().enumerate() {
                table.push([
                    (k + 1).to_string(),
                    name.to_string(),
                    step[c].max.to_string(),
                    step[c].mean.to_string(),
                ])?;
            }
        }
        table.write(&files.path("macro_errors.csv"))?;
        written.push("macro_errors.csv".into());
        println!(
            "macro P_yx error: max {:.3}%",
            100.0 * cmp.max_component(1, 0)
        );

        let solver = match solver.take() {
            Some(s) => s,
            None => RveSolver::new(cfg.mesh.clone(), cfg.boundary)?,
        };
        let mats = cfg.materials.materials(&cfg.twoscale_material)?;
        let model = model.as_ref().expect("surrogate present");
        let mut micro = Table::new(&[
            "point",
            "x",
            "y",
            "component",
            "max_error",
            "mean_error",
            "extrapolated",
        ]);
        for (k, x) in cfg.raw.twoscale.points.iter().enumerate() {
            let q = nearest_quadrature_point(&problem, *x)?;
            let c = compare_micro_point(
                a,
                a.steps.len() - 1,
                q,
                &solver,
                &mats,
                &cfg.newton(),
                model,
                &cfg.twoscale_material,
            )?;
            for (i, name) in ["xx", "xy", "yx", "yy"].iter().enumerate() {
                micro.push([
                    k.to_string(),
                    x[0].to_string(),
                    x[1].to_string(),
                    name.to_string(),
                    c.components[i].max.to_string(),
                    c.components[i].mean.to_string(),
                    c.extrapolated.to_string(),
                ])?;
            }
        }
        micro.write(&files.path("micro_errors.csv"))?;
        written.push("micro_errors.csv".into());
        let err: Vec<f64> = a
            .last()
            .stress
            .iter()
            .zip(&b.last().stress)
            .map(|(p, r)| (p[(1, 0)] - r[(1, 0)]).abs())
            .collect();
        let scale = a
            .last()
            .stress
            .iter()
            .zip(&a.weights)
            .map(|(p, w)| p[(1, 0)].abs() * w)
            .sum::<f64>()
            / a.weights.iter().sum::<f64>();
        cells.push(CellField::scalar(
            "error_Pyx",
            err.iter().map(|e| e / scale).collect(),
        ));
    }
    for sol in fe2.iter().chain(rom.iter()) {
        cells.push(CellField::tensor(
            &format!("P_{}", sol.provider),
            &stress_rows(sol),
        ));
    }
    let points: Vec<PointField> = fe2
        .iter()
        .chain(rom.iter())
        .map(|s| PointField {
            name: format!("u_{}", s.provider),
            values: s.last().displacement.clone(),
        })
        .collect();
    write_vtk(&files.path("twoscale.vtk"), &problem.mesh, &cells, &points)?;
    written.push("twoscale.vtk".into());
    if files_written_fe2(mode) {
        written.push(FE2.into());
    }
    if rom.is_some() {
        written.push(ROM.into());
    }
    for name in &written {
        manifest.record(out, name)?;
    }
    manifest.save(out)?;
    files.commit();
    if let (Some(a), Some(b)) = (&fe2, &rom) {
        println!("speedup {:.0}x", a.wall_time / b.wall_time);
    }
    Ok(())
}

fn files_written_fe2(mode: TwoScaleMode) -> bool {
    mode != TwoScaleMode::Surrogate
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let out = dir(ctx);
    let manifest = Manifest::load(out)?;
    let mut s = String::new();
    let _ = writeln!(s, "# rbhomog report\n");
    let _ = writeln!(s, "- output: `{}`", out.display());
    let _ = writeln!(
        s,
        "- mesh: {} elements, hash `{}`",
        ctx.cfg.mesh.num_elements(),
        ctx.cfg.mesh.hash_hex()
    );
    let current = manifest.data_hash.as_deref() == Some(&ctx.cfg.data_hash());
    let _ = writeln!(s, "- snapshot data matches configuration: {current}");
    let read = |name: &str| -> Option<Table> {
        let p = out.join(name);
        p.exists().then(|| Table::read(&p).ok()).flatten()
    };
    if let Some(t) = read("spectrum.csv") {
        let _ = writeln!(
            s,
            "\n## POD spectrum\n\n| mode | relative eigenvalue | energy |\n|---|---|---|"
        );
        for r in t.rows.iter().take(20) {
            let _ = writeln!(s, "| {} | {} | {} |", r[0], short(&r[2]), short(&r[3]));
        }
    }
    if let Some(t) = read("sweep.csv") {
        let _ = writeln!(s, "\n## Basis size sweep\n\n| L | projection | mean stress error | mean projected stress error |\n|---|---|---|---|");
        for r in &t.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r[0],
                short(&r[1]),
                short(&r[4]),
                short(&r[6])
            );
        }
    }
    if let Some(t) = read("macro_errors.csv") {
        let _ = writeln!(
            s,
            "\n## Two-scale macro errors\n\n| step | component | max | mean |\n|---|---|---|---|"
        );
        for r in &t.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r[0],
                r[1],
                short(&r[2]),
                short(&r[3])
            );
        }
    }
    if let Some(t) = read("timing.csv") {
        let _ = writeln!(
            s,
            "\n## Timing\n\n| provider | seconds | calls | speedup |\n|---|---|---|---|"
        );
        for r in &t.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r[0],
                short(&r[1]),
                r[2],
                short(&r[4])
            );
        }
    }
    let _ = writeln!(s, "\n## Files\n");
    for (name, hash) in &manifest.files {
        let _ = writeln!(s, "- `{name}` sha256 `{}`", &hash[..16]);
    }
    std::fs::write(out.join("report.md"), &s)
        .map_err(|e| CliError::Config(format!("report.md: {e}")))?;
    print!("{s}");
    Ok(())
}

fn short(v: &str) -> String {
    v.parse::<f64>()
        .map(|x| format!("{x:.4e}"))
        .unwrap_or_else(|_| v.to_string())
}
