//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use posff::framework::{
    collect_training_data, evaluate_methods, fit_models, predict_parameters, ExperimentPlan, Method,
};
use posff::gp::{log_marginal_likelihood, GpModel, Kernel, TrainingSet};
use posff::ilcbf::{build_update_law, run_session, update_parameters, IlcWeights, SessionConfig, WeightScaling};
use posff::plant::{
    lift, spatial_mass_law, ControllerTuning, DiscreteTransferFunction, FeedbackController,
    LiftedOperator, SpatialPlant,
};
use posff::trajectory::{
    build_basis, polynomial_reference, BasisDescriptor, BasisKind, BasisMatrix, ProfileOrder, Reference,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn example_reproduction() -> Outcome {
    let start = Instant::now();
    let plan = ExperimentPlan::example();
    let data = collect_training_data(&plan).map_err(|e| e.to_string())?;
    let window = plan.ilc.trailing_window();
    let mut scatter: f64 = 0.0;
    for s in &data.sessions {
        let truth = spatial_mass_law(1.0, s.position[0]);
        let tail = &s.thetas[s.thetas.len() - window..];
        for t in tail {
            scatter = scatter.max((t[0] - truth).abs() / truth);
        }
    }
    let models = fit_models(&plan, &data).map_err(|e| e.to_string())?;
    let grid: Vec<Vec<f64>> = (0..=90).map(|i| vec![0.05 + 0.01 * i as f64]).collect();
    let pred = predict_parameters(&models, &grid).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut max_rel: f64 = 0.0;
    let mut covered = 0;
    for (i, p) in grid.iter().enumerate() {
        let truth = spatial_mass_law(1.0, p[0]);
        let (m, v) = (pred.mean[i][0], pred.variance[i][0]);
        max_rel = max_rel.max((m - truth).abs() / truth);
        if (m - truth).abs() <= 2.0 * v.sqrt() {
            covered += 1;
        }
    }
    let coverage = covered as f64 / grid.len() as f64;
    check(
        scatter <= 0.02 && max_rel <= 0.05 && coverage >= 0.9 && elapsed <= 60.0,
        format!(
            "theta scatter {:.2e}, max rel error {max_rel:.2e}, 2-sigma coverage {covered}/{}, {elapsed:.1} s",
            scatter,
            grid.len()
        ),
    )
}

fn example_setup(names: &[&str]) -> (SpatialPlant, Vec<FeedbackController>, Reference, BasisMatrix) {
    let plant = SpatialPlant::spatial_mass(1.0, 1e-3).unwrap();
    let ctrl = FeedbackController::default_for(&plant, ControllerTuning::default()).unwrap();
    let r = polynomial_reference(0.0, 0.01, 0.1, 1e-3, ProfileOrder::Jerk)
        .unwrap()
        .with_settle(50);
    let basis = build_basis(&r, &BasisDescriptor::from_names(&[names.to_vec()]).unwrap()).unwrap();
    (plant, ctrl, r, basis)
}

fn ilc_convergence() -> Outcome {
    let (plant, ctrl, r, basis) = example_setup(&["velocity", "acceleration"]);
    let config = SessionConfig {
        weights: IlcWeights::default(),
        trials: 10,
        ..SessionConfig::default()
    };
    let mut worst: f64 = 0.0;
    for rho in [0.05, 0.5, 0.95] {
        let session = run_session(&plant, &[rho], &ctrl, &r, &basis, &config).map_err(|e| e.to_string())?;
        let norms = session.error_norms();
        worst = worst.max(norms[10] / norms[0]);
    }
    check(worst <= 1e-2, format!("worst ||e_10|| / ||e_0|| = {worst:.2e}"))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn update_law_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let axes = rng.random_range(1..=2usize);
        let n = rng.random_range(8..=64usize);
        let p = rng.random_range(axes..=4usize);
        let reference = Reference::new(vec![vec![0.0; n]; axes], 1e-3, vec![]).unwrap();
        let mut columns = Vec::new();
        let descriptors: Vec<BasisDescriptor> = (0..p)
            .map(|i| {
                let column = random_vec(&mut rng, n);
                columns.push((i % axes, column.clone()));
                let map = Arc::new(move |_: &[f64], _: f64| column.clone());
                BasisDescriptor::new(i % axes, BasisKind::Custom { name: format!("c{i}"), map })
            })
            .collect();
        let basis = build_basis(&reference, &descriptors).map_err(|e| e.to_string())?;
        let process: Vec<LiftedOperator> = (0..axes)
            .map(|_| {
                let a = rng.random_range(-0.9..0.9);
                let tf = DiscreteTransferFunction::new(
                    vec![rng.random_range(-0.5..0.5), rng.random_range(0.2..2.0)],
                    vec![1.0, -a],
                    1e-3,
                )
                .unwrap();
                lift(&tf, n).unwrap()
            })
            .collect();
        let weights = IlcWeights {
            error: rng.random_range(0.5..2.0),
            effort: rng.random_range(0.0..1e-2),
            effort_change: rng.random_range(0.0..1.0),
            scaling: if rng.random_bool(0.5) { WeightScaling::Relative } else { WeightScaling::Absolute },
        };
        let error: Vec<Vec<f64>> = (0..axes).map(|_| random_vec(&mut rng, n)).collect();
        let theta = random_vec(&mut rng, p);
        let law = build_update_law(&basis, &process, &weights).map_err(|e| e.to_string())?;
        let next = update_parameters(&law, &error, &theta).map_err(|e| e.to_string())?;

        // Independent oracle: stack the weighted residuals of the criterion
        // and solve the least-squares problem by SVD.
        let mut psi = DMatrix::zeros(axes * n, p);
        let mut jpsi = DMatrix::zeros(axes * n, p);
        for (k, (axis, column)) in columns.iter().enumerate() {
            let filtered = process[*axis].matrix() * DVector::from_column_slice(column);
            for t in 0..n {
                psi[(axis * n + t, k)] = column[t];
                jpsi[(axis * n + t, k)] = filtered[t];
            }
        }
        let gamma = match weights.scaling {
            WeightScaling::Relative => jpsi.norm_squared() / psi.norm_squared(),
            WeightScaling::Absolute => 1.0,
        };
        let (we, wf, wdf) = (weights.error, weights.effort * gamma, weights.effort_change * gamma);
        let rows = axes * n;
        let e = DVector::from_iterator(rows, error.iter().flatten().copied());
        let th = DVector::from_column_slice(&theta);
        let mut a = DMatrix::zeros(3 * rows, p);
        let mut b = DVector::zeros(3 * rows);
        a.rows_mut(0, rows).copy_from(&(&jpsi * we.sqrt()));
        b.rows_mut(0, rows).copy_from(&((&e + &jpsi * &th) * we.sqrt()));
        a.rows_mut(rows, rows).copy_from(&(&psi * wf.sqrt()));
        a.rows_mut(2 * rows, rows).copy_from(&(&psi * wdf.sqrt()));
        b.rows_mut(2 * rows, rows).copy_from(&(&psi * &th * wdf.sqrt()));
        let oracle = a.svd(true, true).solve(&b, 1e-14).map_err(|e| e.to_string())?;
        let rel = (DVector::from_vec(next) - &oracle).norm() / oracle.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    check(worst <= 1e-10, format!("worst relative deviation {worst:.2e} over 50 instances"))
}

fn separated_points(rng: &mut ChaCha8Rng, count: usize, dim: usize, gap: f64) -> Vec<Vec<f64>> {
    let mut points: Vec<Vec<f64>> = Vec::new();
    while points.len() < count {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
        if points
            .iter()
            .all(|q| q.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= gap)
        {
            points.push(p);
        }
    }
    points
}

fn gp_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let (mut interp, mut psd, mut above_prior, mut growth) = (0.0_f64, 0.0_f64, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for case in 0..50 {
        let dim = rng.random_range(1..=2usize);
        let l = rng.random_range(3..=12usize);
        let gap = 0.5 / ((l + 1) as f64).powf(1.0 / dim as f64);
        let lengthscales: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5) * gap).collect();
        let mut points = separated_points(&mut rng, l + 1, dim, gap);
        let extra = points.pop().unwrap();
        let values: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sf2 = rng.random_range(0.3..3.0);
        let kernel = Kernel::new(sf2, lengthscales).unwrap();
        let training = TrainingSet::new(points.clone(), values.clone(), 0).unwrap();
        let side: usize = if dim == 1 { 200 } else { 14 };
        let grid: Vec<Vec<f64>> = (0..side.pow(dim as u32))
            .map(|k| {
                let coord = |i: usize| -0.2 + 1.4 * i as f64 / (side - 1) as f64;
                if dim == 1 { vec![coord(k)] } else { vec![coord(k / side), coord(k % side)] }
            })
            .collect();

        let exact = GpModel::new(kernel.clone(), 0.0, training.clone()).map_err(|e| e.to_string())?;
        let (mean, _) = exact.predict(&points).map_err(|e| e.to_string())?;
        for (m, v) in mean.iter().zip(&values) {
            interp = interp.max((m - v).abs());
        }

        let noise = if case % 2 == 0 { 0.0 } else { 1e-2 };
        let model = GpModel::new(kernel.clone(), noise, training).map_err(|e| e.to_string())?;
        let post = model.posterior(&grid).map_err(|e| e.to_string())?;
        psd = psd.min(post.covariance.clone().symmetric_eigenvalues().min());
        for v in post.variance() {
            above_prior = above_prior.max(v - sf2);
        }
        let mut more_points = points.clone();
        let mut more_values = values.clone();
        more_points.push(extra);
        more_values.push(rng.random_range(-2.0..2.0));
        let larger = GpModel::new(kernel, noise, TrainingSet::new(more_points, more_values, 0).unwrap())
            .map_err(|e| e.to_string())?;
        let (_, after) = larger.predict(&grid).map_err(|e| e.to_string())?;
        for (a, b) in after.iter().zip(post.variance()) {
            growth = growth.max(a - b);
        }
    }
    check(
        interp <= 1e-8 && psd >= -1e-8 && above_prior <= 1e-10 && growth <= 1e-9,
        format!(
            "interpolation {interp:.1e}, min eigenvalue {psd:.1e}, variance above prior {above_prior:.1e}, growth with data {growth:.1e}"
        ),
    )
}

fn likelihood_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dim = rng.random_range(1..=2usize);
        let points = separated_points(&mut rng, 8, dim, 0.05);
        let values: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let training = TrainingSet::new(points, values, 0).unwrap();
        let mut x: Vec<f64> = vec![rng.random_range(0.3f64..3.0).ln()];
        x.extend((0..dim).map(|_| rng.random_range(0.1f64..0.8).ln()));
        x.push(rng.random_range(1e-3f64..1e-1).ln());
        let offset = training.mean();
        let f = |x: &[f64]| {
            let kernel = Kernel::new(x[0].exp(), x[1..=dim].iter().map(|v| v.exp()).collect()).unwrap();
            log_marginal_likelihood(&training, &kernel, x[dim + 1].exp(), offset)
        };
        let (_, analytic) = f(&x).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let mut numeric = Vec::new();
        for i in 0..x.len() {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[i] += h;
            dn[i] -= h;
            numeric.push((f(&up).map_err(|e| e.to_string())?.0 - f(&dn).map_err(|e| e.to_string())?.0) / (2.0 * h));
        }
        let diff = DVector::from_vec(analytic) - DVector::from_vec(numeric.clone());
        worst = worst.max(diff.norm() / DVector::from_vec(numeric).norm().max(1e-8));
    }
    check(worst <= 1e-5, format!("worst relative disagreement {worst:.2e} over 50 sets"))
}

fn method_comparison() -> Outcome {
    let plan = ExperimentPlan::example();
    let data = collect_training_data(&plan).map_err(|e| e.to_string())?;
    let models = fit_models(&plan, &data).map_err(|e| e.to_string())?;
    let report = evaluate_methods(&plan, &data, &models, &Method::ALL).map_err(|e| e.to_string())?;
    let mut count = 0;
    let (mut vs_center, mut vs_local): (f64, f64) = (0.0, 0.0);
    for (i, p) in plan.test.iter().enumerate() {
        if (p[0] - 0.5).abs() < 0.2 - 1e-12 {
            continue;
        }
        count += 1;
        let norm = |m| report.cell(i, m).unwrap().error_2norm;
        vs_center = vs_center.max(norm(Method::Gp) / norm(Method::Center));
        vs_local = vs_local.max(norm(Method::Gp) / norm(Method::LocalIlc));
    }
    check(
        count >= 5 && vs_center <= 0.5 && vs_local <= 1.1,
        format!("{count} positions, worst gp/center {vs_center:.3}, worst gp/local {vs_local:.3}"),
    )
}

fn periodic_scenario() -> Outcome {
    let plan = ExperimentPlan::periodic_example();
    let pitch = match plan.plant.kind {
        posff::plant::PlantKind::PeriodicFlux { pitch, .. } => pitch,
        _ => return Err("periodic example lost its plant".into()),
    };
    let data = collect_training_data(&plan).map_err(|e| e.to_string())?;
    let models = fit_models(&plan, &data).map_err(|e| e.to_string())?;
    let label = plan
        .parameter_labels()
        .iter()
        .position(|l| l == "acceleration_0")
        .ok_or("no acceleration_0 parameter")?;
    let n = 64;
    let grid: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 / n as f64, 0.5]).collect();
    let pred = predict_parameters(&models, &grid).map_err(|e| e.to_string())?;
    let curve: Vec<f64> = pred.mean.iter().map(|m| m[label]).collect();
    let mean = curve.iter().sum::<f64>() / n as f64;
    let power: Vec<f64> = (1..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (j, v) in curve.iter().enumerate() {
                let phase = std::f64::consts::TAU * (k * j) as f64 / n as f64;
                re += (v - mean) * phase.cos();
                im -= (v - mean) * phase.sin();
            }
            re * re + im * im
        })
        .collect();
    let peak = 1 + power
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    // Bin k is k cycles per unit length.
    let expected = 1.0 / pitch;
    check(
        (peak as f64 - expected).abs() <= 1.0,
        format!("dominant frequency {peak} cycles per unit, expected {expected}"),
    )
}

fn output_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let run = |dir: &Path| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_posff"))
            .args(["evaluate", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(dir)
            .args(["--seed", "42"])
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).into_owned())
        }
    };
    let a = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let b = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    run(a.path())?;
    run(b.path())?;
    let first = output_files(a.path());
    let second = output_files(b.path());
    run(a.path())?;
    let cached = output_files(a.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    check(
        !first.is_empty() && first == second && first == cached,
        format!("fresh, fresh and cached runs agree on {}", names.join(", ")),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 example reproduction", example_reproduction),
        ("2 ILC convergence", ilc_convergence),
        ("3 update-law oracle", update_law_oracle),
        ("4 GP invariants", gp_invariants),
        ("5 likelihood gradient", likelihood_gradient),
        ("6 method comparison", method_comparison),
        ("7 periodic scenario", periodic_scenario),
        ("8 determinism", determinism),
    ];
    let mut failures = 0;
    for (name, criterion) in criteria {
        let outcome = std::panic::catch_unwind(criterion)
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
