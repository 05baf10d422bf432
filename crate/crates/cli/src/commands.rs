use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use posff::export;
use posff::framework::{
    assemble_report, center_session, collect_training_data, fit_models, local_sessions,
    predict_parameters, EvaluationReport, ExperimentPlan, Method, SessionSummary, TrainingData,
};
use posff::gp::{GpModel, GpModelRecord};
use posff::ilcbf::{run_session, IlcSession};
use posff::plant::{simulate_closed_loop, NoiseSpec};
use posff::seed::{self, Stream};
use serde::Serialize;
use serde_json::json;

use crate::cache::Cache;
use crate::config::{self, RunConfig};
use crate::{CliError, Common, Stage};

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

struct Context {
    run: RunConfig,
    cache: Cache,
    stage: Option<Stage>,
}

impl Context {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut run = config::load(&common.config)?;
        if let Some(dir) = &common.out_dir {
            run.out_dir = dir.clone();
        }
        if let Some(seed) = common.seed {
            run.plan.master_seed = seed;
        }
        fs::create_dir_all(&run.out_dir)?;
        Ok(Self {
            cache: Cache::new(&run.out_dir),
            run,
            stage: common.stage,
        })
    }

    fn plan(&self) -> &ExperimentPlan {
        &self.run.plan
    }

    fn refresh(&self, stage: Stage) -> bool {
        self.stage.is_some_and(|s| s <= stage)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.run.out_dir.join(name)
    }

    /// Inputs every learning session depends on.
    fn session_inputs(&self) -> serde_json::Value {
        let p = self.plan();
        json!({
            "plant": p.plant,
            "controller": p.controller,
            "reference": p.reference,
            "basis": p.basis,
            "ilc": p.ilc,
            "seed": p.master_seed,
        })
    }

    fn training_data(&self) -> Result<TrainingData, CliError> {
        let mut inputs = self.session_inputs();
        inputs["training"] = json!(self.plan().training);
        let key = Cache::key("collect", &inputs)?;
        self.cache.get_or_compute("collect", &key, self.refresh(Stage::Collect), || {
            Ok(collect_training_data(self.plan())?)
        })
    }

    fn models(&self, training: &TrainingData) -> Result<Vec<GpModel>, CliError> {
        let inputs = json!({
            "training": training,
            "gp": self.plan().gp,
            "seed": self.plan().master_seed,
        });
        let key = Cache::key("fit", &inputs)?;
        let records: Vec<GpModelRecord> =
            self.cache.get_or_compute("fit", &key, self.refresh(Stage::Fit), || {
                Ok(fit_models(self.plan(), training)?
                    .iter()
                    .map(GpModel::to_record)
                    .collect())
            })?;
        Ok(records
            .into_iter()
            .map(GpModel::from_record)
            .collect::<posff::Result<_>>()?)
    }

    fn center(&self) -> Result<SessionSummary, CliError> {
        let mut inputs = self.session_inputs();
        inputs["center"] = json!(self.plan().center_position());
        let key = Cache::key("center", &inputs)?;
        self.cache.get_or_compute("center", &key, self.refresh(Stage::Evaluate), || {
            Ok(center_session(self.plan())?)
        })
    }

    fn local(&self) -> Result<Vec<SessionSummary>, CliError> {
        let mut inputs = self.session_inputs();
        inputs["test"] = json!(self.plan().test);
        let key = Cache::key("local", &inputs)?;
        self.cache.get_or_compute("local", &key, self.refresh(Stage::Evaluate), || {
            Ok(local_sessions(self.plan())?)
        })
    }
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("{what} `{text}` is not a comma-separated list of numbers")))
        })
        .collect()
}

fn position_arg(ctx: &Context, position: Option<&str>) -> Result<Vec<f64>, CliError> {
    let p = match position {
        Some(text) => parse_list(text, "position")?,
        None => ctx.plan().center_position(),
    };
    ctx.plan().plant.domain.check(&p)?;
    Ok(p)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn fmt_position(p: &[f64]) -> String {
    p.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(",")
}

fn fmt_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(" ")
}

pub fn simulate(common: &Common, position: Option<&str>, theta: Option<&str>) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let plan = ctx.plan();
    let position = position_arg(&ctx, position)?;
    let reference = plan.reference_signal()?;
    let basis = plan.basis_matrix(&reference)?;
    let theta = match theta {
        Some(text) => parse_list(text, "theta")?,
        None => vec![0.0; basis.n_params()],
    };
    let f = basis.feedforward(&theta)?;
    let noise = if plan.evaluation_noise { plan.ilc.noise.clone() } else { NoiseSpec::off() };
    let response = simulate_closed_loop(
        &plan.plant,
        &position,
        &plan.controllers()?,
        reference.signals(),
        &f,
        &noise,
        seed::derive(plan.master_seed, Stream::Evaluation, 0),
    )?;
    let mut w = create(&ctx.out("reference.csv"))?;
    export::write_reference_csv(&mut w, &reference)?;
    w.flush()?;
    let mut w = create(&ctx.out("simulation.csv"))?;
    export::write_simulation_csv(&mut w, &reference, &response)?;
    w.flush()?;
    println!("position        {}", fmt_position(&position));
    println!("theta           {}", fmt_values(&theta));
    println!("error 2-norm    {:.6e}", response.error_norm());
    println!("max |error|     {:.6e}", response.max_abs_error());
    Ok(())
}

#[derive(Serialize)]
struct SessionFile<'a> {
    schema_version: u32,
    labels: Vec<String>,
    session: &'a IlcSession,
}

pub fn ilc(common: &Common, position: Option<&str>) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let plan = ctx.plan();
    let position = position_arg(&ctx, position)?;
    let reference = plan.reference_signal()?;
    let basis = plan.basis_matrix(&reference)?;
    let config = plan.session_config(seed::derive(plan.master_seed, Stream::Center, 0));
    let session = run_session(&plan.plant, &position, &plan.controllers()?, &reference, &basis, &config)?;
    let mut w = create(&ctx.out("session.csv"))?;
    export::write_session_csv(&mut w, &session)?;
    w.flush()?;
    write_json(
        &ctx.out("session.json"),
        &SessionFile {
            schema_version: OUTPUT_SCHEMA_VERSION,
            labels: plan.parameter_labels(),
            session: &session,
        },
    )?;
    let last = session.history.last().expect("session has trials");
    println!("position          {}", fmt_position(&position));
    println!("trials            {}", session.trials);
    println!("initial 2-norm    {:.6e}", session.history[0].error_norm);
    println!("final 2-norm      {:.6e}", last.error_norm);
    println!("relative change   {:.3e}", session.relative_change());
    for (label, t) in plan.parameter_labels().iter().zip(&last.theta) {
        println!("{label:<18}{t:.6e}");
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainingFile<'a> {
    schema_version: u32,
    #[serde(flatten)]
    data: &'a TrainingData,
}

fn write_training(ctx: &Context, data: &TrainingData) -> Result<(), CliError> {
    let mut w = create(&ctx.out("training_data.csv"))?;
    export::write_training_csv(&mut w, data)?;
    w.flush()?;
    write_json(
        &ctx.out("training_data.json"),
        &TrainingFile {
            schema_version: OUTPUT_SCHEMA_VERSION,
            data,
        },
    )
}

pub fn collect(common: &Common) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let data = ctx.training_data()?;
    write_training(&ctx, &data)?;
    println!("{:<16}{}", "position", data.labels.join("  "));
    for s in &data.sessions {
        println!("{:<16}{}", fmt_position(&s.position), fmt_values(&s.observation));
    }
    Ok(())
}

/// Regular grid over the plan's domain, `points` per dimension.
fn grid(plan: &ExperimentPlan, points: usize) -> Vec<Vec<f64>> {
    let domain = &plan.plant.domain;
    let dim = domain.min.len();
    let total = points.pow(dim as u32);
    (0..total)
        .map(|mut k| {
            let mut p = vec![0.0; dim];
            for d in (0..dim).rev() {
                let i = k % points;
                k /= points;
                let t = i as f64 / (points - 1) as f64;
                p[d] = domain.min[d] + t * (domain.max[d] - domain.min[d]);
            }
            p
        })
        .collect()
}

pub fn fit(common: &Common) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let data = ctx.training_data()?;
    write_training(&ctx, &data)?;
    let models = ctx.models(&data)?;
    for (i, m) in models.iter().enumerate() {
        write_json(&ctx.out(&format!("gp_model_{i}.json")), &m.to_record())?;
    }
    let points = grid(ctx.plan(), ctx.run.grid_points);
    let predictions = predict_parameters(&models, &points)?;
    let mut w = create(&ctx.out("gp_grid.csv"))?;
    export::write_predictions_csv(&mut w, &data.labels, &predictions)?;
    w.flush()?;
    println!("{:<18}{:>13}{:>13}{:>13}  lengthscales", "parameter", "offset", "sigma_f^2", "sigma_n^2");
    for (label, m) in data.labels.iter().zip(&models) {
        println!(
            "{label:<18}{:>13.4e}{:>13.4e}{:>13.4e}  {}",
            m.offset(),
            m.kernel().signal_variance,
            m.noise_variance(),
            fmt_values(&m.kernel().lengthscales)
        );
        if let Some(report) = m.fit_report() {
            for warning in &report.warnings {
                println!("  note: {warning}");
            }
        }
    }
    Ok(())
}

pub fn predict(common: &Common, positions: &[String]) -> Result<(), CliError> {
    let ctx = Context::new(common)?;
    let positions = if positions.is_empty() {
        ctx.plan().test.clone()
    } else {
        positions
            .iter()
            .map(|p| position_arg(&ctx, Some(p)))
            .collect::<Result<Vec<_>, _>>()?
    };
    if positions.is_empty() {
        return Err(CliError::Config(
            "no positions: pass --position or set positions.test".into(),
        ));
    }
    let data = ctx.training_data()?;
    let models = ctx.models(&data)?;
    let predictions = predict_parameters(&models, &positions)?;
    let mut w = create(&ctx.out("predictions.csv"))?;
    export::write_predictions_csv(&mut w, &data.labels, &predictions)?;
    w.flush()?;
    println!("{:<16}{}", "position", data.labels.join("  "));
    for (p, m) in positions.iter().zip(&predictions.mean) {
        println!("{:<16}{}", fmt_position(p), fmt_values(m));
    }
    Ok(())
}

fn parse_methods(text: &str) -> Result<Vec<Method>, CliError> {
    let mut methods = Vec::new();
    for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m = Method::parse(name).map_err(|e| CliError::Config(e.to_string()))?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(CliError::Config("--methods is empty".into()));
    }
    Ok(methods)
}

fn print_table(report: &EvaluationReport, positions: &[Vec<f64>]) {
    let mut header = format!("{:<16}", "position");
    for m in &report.methods {
        header.push_str(&format!("{:>14}", m.name()));
    }
    println!("{header}");
    for (i, p) in positions.iter().enumerate() {
        let mut row = format!("{:<16}", fmt_position(p));
        for m in &report.methods {
            let cell = report.cell(i, *m).expect("cell per method");
            row.push_str(&format!("{:>14.4e}", cell.error_2norm));
        }
        println!("{row}");
    }
}

pub fn evaluate(common: &Common, methods: &str) -> Result<(), CliError> {
    let methods = parse_methods(methods)?;
    let ctx = Context::new(common)?;
    if ctx.plan().test.is_empty() {
        return Err(CliError::Config("positions.test is empty".into()));
    }
    let data = ctx.training_data()?;
    let models = if methods.contains(&Method::Gp) {
        ctx.models(&data)?
    } else {
        Vec::new()
    };
    let center = if methods.contains(&Method::Center) { Some(ctx.center()?) } else { None };
    let local = if methods.contains(&Method::LocalIlc) { ctx.local()? } else { Vec::new() };
    let report = assemble_report(ctx.plan(), &data, &models, &methods, center, local)?;
    write_json(&ctx.out("report.json"), &report)?;
    let mut w = create(&ctx.out("summary.csv"))?;
    export::write_summary_csv(&mut w, &report)?;
    w.flush()?;
    println!("error 2-norm per test position");
    print_table(&report, &ctx.plan().test);
    Ok(())
}
