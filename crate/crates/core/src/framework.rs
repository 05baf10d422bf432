//! The learning-then-regression pipeline and the method comparison.
//!
//! 1. Run an ILC session at every training position; the observation of each
//!    parameter is the mean of `θ_j` over the trailing trials.
//! 2. Fit one GP per feedforward parameter.
//! 3. At each test position compare center-tuned parameters, GP-predicted
//!    parameters and parameters learned locally by a fresh ILC session.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{
    fit_hyperparameters, GpModel, GpModelRecord, Objective, OptimizerConfig, TrainingSet,
};
use crate::ilcbf::{run_session, IlcSession, IlcWeights, ModelChoice, SessionConfig};
use crate::plant::{
    simulate_closed_loop, ControllerTuning, DomainBox, FeedbackController, NoiseSpec, PlantKind,
    SpatialPlant,
};
use crate::seed::{self, Stream};
use crate::trajectory::{
    build_basis, polynomial_reference, BasisDescriptor, BasisKind, BasisMatrix, ProfileOrder,
    Reference,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rest-to-rest move of every axis, from 0 to `strokes[axis]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    pub strokes: Vec<f64>,
    pub duration: f64,
    pub order: ProfileOrder,
    pub settle_time: f64,
}

impl ReferenceSpec {
    pub fn build(&self, sample_time: f64) -> Result<Reference> {
        if self.settle_time < 0.0 {
            return Err(Error::InvalidInput("settle time must be non-negative".into()));
        }
        let settle = (self.settle_time / sample_time).round() as usize;
        let parts = self
            .strokes
            .iter()
            .map(|s| polynomial_reference(0.0, *s, self.duration, sample_time, self.order))
            .collect::<Result<Vec<_>>>()?;
        Ok(Reference::stack(parts)?.with_settle(settle))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlcPlan {
    pub weights: IlcWeights,
    pub trials: usize,
    /// Fraction of the trials whose parameters are averaged into the
    /// training observation.
    pub trailing_fraction: f64,
    pub model: ModelChoice,
    pub noise: NoiseSpec,
}

impl IlcPlan {
    /// Number of trailing history entries averaged, at least one.
    pub fn trailing_window(&self) -> usize {
        ((self.trailing_fraction * self.trials as f64).round() as usize).clamp(1, self.trials + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub plant: SpatialPlant,
    pub controller: ControllerTuning,
    pub reference: ReferenceSpec,
    /// Basis names per axis.
    pub basis: Vec<Vec<String>>,
    pub training: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
    pub center: Option<Vec<f64>>,
    pub ilc: IlcPlan,
    pub gp: OptimizerConfig,
    /// Evaluate every method under the same seeded noise (off when the
    /// learning noise is off).
    pub evaluation_noise: bool,
    pub master_seed: u64,
}

impl ExperimentPlan {
    /// Spatially distributed mass, acceleration feedforward, four training
    /// positions.
    pub fn example() -> Self {
        Self {
            plant: SpatialPlant::spatial_mass(1.0, 1e-3).expect("valid example plant"),
            controller: ControllerTuning::default(),
            reference: ReferenceSpec {
                strokes: vec![0.01],
                duration: 0.1,
                order: ProfileOrder::Jerk,
                settle_time: 0.05,
            },
            basis: vec![vec!["acceleration".into()]],
            training: [0.05, 0.35, 0.65, 0.95].iter().map(|p| vec![*p]).collect(),
            test: [0.1, 0.2, 0.25, 0.3, 0.5, 0.7, 0.75, 0.8, 0.9]
                .iter()
                .map(|p| vec![*p])
                .collect(),
            center: None,
            ilc: IlcPlan {
                weights: IlcWeights::default(),
                trials: 20,
                trailing_fraction: 0.4,
                model: ModelChoice::Exact,
                noise: NoiseSpec::uniform(1e-6),
            },
            gp: OptimizerConfig {
                objective: Objective::LeaveOneOut,
                ..OptimizerConfig::default()
            },
            evaluation_noise: true,
            master_seed: 42,
        }
    }

    /// Two-axis plant with periodic actuator gain along the first coordinate.
    pub fn periodic_example() -> Self {
        let pitch = 0.25;
        // Three rows along ρ₂ with staggered ρ₁ samples, so no two rows share
        // a ρ₁ value.
        let training = [0.1, 0.5, 0.9]
            .into_iter()
            .enumerate()
            .flat_map(|(row, y)| {
                (0..16).map(move |i| vec![(i as f64 + (row as f64 + 0.5) / 3.0) / 16.0, y])
            })
            .collect();
        Self {
            plant: SpatialPlant::new(
                PlantKind::PeriodicFlux {
                    masses: [1.0, 0.6],
                    dampings: [5.0, 3.0],
                    pitch,
                    ripple: 0.2,
                    mass_slope: 0.05,
                },
                1e-3,
                DomainBox::unit(2),
            )
            .expect("valid periodic plant"),
            controller: ControllerTuning::default(),
            reference: ReferenceSpec {
                strokes: vec![0.01, 0.01],
                duration: 0.1,
                order: ProfileOrder::Jerk,
                settle_time: 0.05,
            },
            basis: vec![
                vec!["velocity".into(), "acceleration".into()],
                vec![
                    "velocity".into(),
                    "acceleration".into(),
                    "sign_velocity".into(),
                ],
            ],
            training,
            test: vec![
                vec![0.2, 0.3],
                vec![0.45, 0.7],
                vec![0.6, 0.2],
                vec![0.85, 0.6],
                vec![0.0, 1.0],
                vec![1.0, 0.0],
            ],
            center: None,
            ilc: IlcPlan {
                weights: IlcWeights::default(),
                trials: 20,
                trailing_fraction: 0.4,
                model: ModelChoice::Exact,
                noise: NoiseSpec::uniform(1e-6),
            },
            gp: OptimizerConfig {
                objective: Objective::LeaveOneOut,
                ..OptimizerConfig::default()
            },
            evaluation_noise: true,
            master_seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.training.len() < 2 {
            return Err(Error::InvalidInput(
                "an experiment needs at least two training positions".into(),
            ));
        }
        for p in self.training.iter().chain(&self.test) {
            self.plant.domain.check(p)?;
        }
        self.plant.domain.check(&self.center_position())?;
        if self.basis.len() != self.plant.axes() {
            return Err(Error::DimensionMismatch(format!(
                "basis lists for {} axes but the plant has {}",
                self.basis.len(),
                self.plant.axes()
            )));
        }
        if self.reference.strokes.len() != self.plant.axes() {
            return Err(Error::DimensionMismatch(format!(
                "{} strokes for a {}-axis plant",
                self.reference.strokes.len(),
                self.plant.axes()
            )));
        }
        if self.ilc.trials == 0 {
            return Err(Error::InvalidInput("ILC needs at least one trial".into()));
        }
        if !(self.ilc.trailing_fraction > 0.0 && self.ilc.trailing_fraction <= 1.0) {
            return Err(Error::InvalidInput(
                "trailing fraction must lie in (0, 1]".into(),
            ));
        }
        self.ilc.weights.validate()?;
        self.basis_descriptors()?;
        Ok(())
    }

    pub fn center_position(&self) -> Vec<f64> {
        self.center
            .clone()
            .unwrap_or_else(|| self.plant.domain.center())
    }

    pub fn basis_descriptors(&self) -> Result<Vec<BasisDescriptor>> {
        BasisDescriptor::from_names(&self.basis)
    }

    pub fn controllers(&self) -> Result<Vec<FeedbackController>> {
        FeedbackController::default_for(&self.plant, self.controller)
    }

    pub fn reference_signal(&self) -> Result<Reference> {
        self.reference.build(self.plant.sample_time)
    }

    pub fn basis_matrix(&self, reference: &Reference) -> Result<BasisMatrix> {
        build_basis(reference, &self.basis_descriptors()?)
    }

    pub fn parameter_labels(&self) -> Vec<String> {
        self.basis
            .iter()
            .enumerate()
            .flat_map(|(axis, names)| names.iter().map(move |n| format!("{n}_{axis}")))
            .collect()
    }

    pub fn session_config(&self, seed: u64) -> SessionConfig {
        SessionConfig {
            weights: self.ilc.weights,
            trials: self.ilc.trials,
            theta0: None,
            noise: self.ilc.noise.clone(),
            seed,
            model: self.ilc.model.clone(),
        }
    }

    /// Noise-free physical parameter each basis column would ideally learn.
    pub fn ideal_parameters(&self, position: &[f64]) -> Result<Vec<f64>> {
        let axes = self.plant.axis_parameters(position)?;
        self.basis_descriptors()?
            .iter()
            .map(|d| {
                let p = axes[d.axis];
                Ok(match d.kind {
                    BasisKind::Velocity => p.damping / p.gain,
                    BasisKind::Acceleration => p.mass / p.gain,
                    _ => 0.0,
                })
            })
            .collect()
    }
}

/// Shared simulation ingredients derived from a plan.
struct Setup {
    controllers: Vec<FeedbackController>,
    reference: Reference,
    basis: BasisMatrix,
}

impl Setup {
    fn new(plan: &ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let reference = plan.reference_signal()?;
        let basis = plan.basis_matrix(&reference)?;
        Ok(Self {
            controllers: plan.controllers()?,
            reference,
            basis,
        })
    }

    fn session(&self, plan: &ExperimentPlan, position: &[f64], seed: u64) -> Result<IlcSession> {
        run_session(
            &plan.plant,
            position,
            &self.controllers,
            &self.reference,
            &self.basis,
            &plan.session_config(seed),
        )
    }
}

/// Compact record of one ILC session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub position: Vec<f64>,
    pub seed: u64,
    pub error_norms: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    /// Trailing-window mean of `θ_j`.
    pub observation: Vec<f64>,
    /// Sample variance of `θ_j` over the window divided by its length: the
    /// variance of `observation` when the trailing trials are independent.
    pub observation_variance: Vec<f64>,
    pub relative_change: f64,
    pub update_condition: f64,
}

impl SessionSummary {
    pub fn from_session(session: &IlcSession, window: usize) -> Self {
        Self {
            position: session.position.clone(),
            seed: session.seed,
            error_norms: session.error_norms(),
            thetas: session.history.iter().map(|t| t.theta.clone()).collect(),
            observation: session.trailing_mean(window),
            observation_variance: trailing_variance(session, window),
            relative_change: session.relative_change(),
            update_condition: session.update_condition,
        }
    }
}

fn trailing_variance(session: &IlcSession, window: usize) -> Vec<f64> {
    let window = window.clamp(1, session.history.len());
    let mean = session.trailing_mean(window);
    if window < 2 {
        return vec![0.0; mean.len()];
    }
    let tail = &session.history[session.history.len() - window..];
    (0..mean.len())
        .map(|p| {
            let ss: f64 = tail.iter().map(|t| (t.theta[p] - mean[p]).powi(2)).sum();
            ss / (window - 1) as f64 / window as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub labels: Vec<String>,
    pub sessions: Vec<SessionSummary>,
}

impl TrainingData {
    /// One training set per feedforward parameter.
    pub fn training_sets(&self) -> Result<Vec<TrainingSet>> {
        (0..self.labels.len())
            .map(|p| {
                TrainingSet::new(
                    self.sessions.iter().map(|s| s.position.clone()).collect(),
                    self.sessions.iter().map(|s| s.observation[p]).collect(),
                    p,
                )
            })
            .collect()
    }

    /// Mean observation variance of one parameter across positions.
    pub fn mean_observation_variance(&self, parameter: usize) -> f64 {
        let n = self.sessions.len().max(1) as f64;
        self.sessions
            .iter()
            .map(|s| s.observation_variance.get(parameter).copied().unwrap_or(0.0))
            .sum::<f64>()
            / n
    }
}

fn run_sessions(
    plan: &ExperimentPlan,
    setup: &Setup,
    positions: &[Vec<f64>],
    stream: Stream,
) -> Result<Vec<SessionSummary>> {
    let window = plan.ilc.trailing_window();
    positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let seed = seed::derive(plan.master_seed, stream, i as u64);
            setup
                .session(plan, p, seed)
                .map(|s| SessionSummary::from_session(&s, window))
        })
        .collect()
}

pub fn collect_training_data(plan: &ExperimentPlan) -> Result<TrainingData> {
    let setup = Setup::new(plan)?;
    Ok(TrainingData {
        labels: plan.parameter_labels(),
        sessions: run_sessions(plan, &setup, &plan.training, Stream::Training)?,
    })
}

/// Fit one GP per parameter; each fit gets its own derived seed. The noise
/// variance is bounded below by the mean observation variance of the sessions.
pub fn fit_models(plan: &ExperimentPlan, training: &TrainingData) -> Result<Vec<GpModel>> {
    let sets = training.training_sets()?;
    sets.par_iter()
        .enumerate()
        .map(|(p, set)| {
            let config = OptimizerConfig {
                seed: seed::derive(plan.master_seed, Stream::Fit, p as u64),
                noise_floor: plan.gp.noise_floor.max(training.mean_observation_variance(p)),
                ..plan.gp.clone()
            };
            fit_hyperparameters(set, &config)
        })
        .collect()
}

/// Posterior mean and variance of every parameter, indexed `[position][parameter]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub positions: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub variance: Vec<Vec<f64>>,
}

pub fn predict_parameters(models: &[GpModel], positions: &[Vec<f64>]) -> Result<Predictions> {
    let per_model = models
        .iter()
        .map(|m| m.predict(positions))
        .collect::<Result<Vec<_>>>()?;
    let transpose = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<Vec<f64>> {
        (0..positions.len())
            .map(|i| per_model.iter().map(|mv| pick(mv)[i]).collect())
            .collect()
    };
    Ok(Predictions {
        positions: positions.to_vec(),
        mean: transpose(|mv| &mv.0),
        variance: transpose(|mv| &mv.1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Center,
    Gp,
    LocalIlc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Center, Method::Gp, Method::LocalIlc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Center => "center",
            Method::Gp => "gp",
            Method::LocalIlc => "local_ilc",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "center" => Ok(Method::Center),
            "gp" => Ok(Method::Gp),
            "local_ilc" | "local" => Ok(Method::LocalIlc),
            other => Err(Error::InvalidInput(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationCell {
    pub position: Vec<f64>,
    pub method: Method,
    pub theta: Vec<f64>,
    pub error_2norm: f64,
    pub axis_error_2norms: Vec<f64>,
    pub max_abs_error: f64,
    pub error: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub labels: Vec<String>,
    pub methods: Vec<Method>,
    pub center: Option<SessionSummary>,
    pub local: Vec<SessionSummary>,
    pub training: Vec<SessionSummary>,
    pub models: Vec<GpModelRecord>,
    pub cells: Vec<EvaluationCell>,
}

impl EvaluationReport {
    pub fn cell(&self, position_index: usize, method: Method) -> Option<&EvaluationCell> {
        let m = self.methods.iter().position(|x| *x == method)?;
        self.cells.get(position_index * self.methods.len() + m)
    }
}

pub fn center_session(plan: &ExperimentPlan) -> Result<SessionSummary> {
    let setup = Setup::new(plan)?;
    let seed = seed::derive(plan.master_seed, Stream::Center, 0);
    Ok(SessionSummary::from_session(
        &setup.session(plan, &plan.center_position(), seed)?,
        plan.ilc.trailing_window(),
    ))
}

pub fn local_sessions(plan: &ExperimentPlan) -> Result<Vec<SessionSummary>> {
    let setup = Setup::new(plan)?;
    run_sessions(plan, &setup, &plan.test, Stream::Local)
}

/// Evaluate the chosen methods from precomputed center and local sessions.
pub fn assemble_report(
    plan: &ExperimentPlan,
    training: &TrainingData,
    models: &[GpModel],
    methods: &[Method],
    center: Option<SessionSummary>,
    local: Vec<SessionSummary>,
) -> Result<EvaluationReport> {
    let setup = Setup::new(plan)?;
    if methods.contains(&Method::Center) && center.is_none() {
        return Err(Error::InvalidInput("center method needs a center session".into()));
    }
    if methods.contains(&Method::LocalIlc) && local.len() != plan.test.len() {
        return Err(Error::InvalidInput(
            "local method needs one session per test position".into(),
        ));
    }
    let predictions = if methods.contains(&Method::Gp) {
        Some(predict_parameters(models, &plan.test)?)
    } else {
        None
    };
    let noise = if plan.evaluation_noise {
        plan.ilc.noise.clone()
    } else {
        NoiseSpec::off()
    };
    let cells: Vec<Vec<EvaluationCell>> = plan
        .test
        .par_iter()
        .enumerate()
        .map(|(i, position)| {
            let eval_seed = seed::derive(plan.master_seed, Stream::Evaluation, i as u64);
            methods
                .iter()
                .map(|&method| {
                    let theta = match method {
                        Method::Center => center.as_ref().expect("checked").observation.clone(),
                        Method::Gp => predictions.as_ref().expect("checked").mean[i].clone(),
                        Method::LocalIlc => local[i].observation.clone(),
                    };
                    let f = setup.basis.feedforward(&theta)?;
                    let response = simulate_closed_loop(
                        &plan.plant,
                        position,
                        &setup.controllers,
                        setup.reference.signals(),
                        &f,
                        &noise,
                        eval_seed,
                    )
                    .map_err(|e| e.at(position))?;
                    Ok(EvaluationCell {
                        position: position.clone(),
                        method,
                        theta,
                        error_2norm: response.error_norm(),
                        axis_error_2norms: response.axis_error_norms(),
                        max_abs_error: response.max_abs_error(),
                        error: response.e,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        labels: plan.parameter_labels(),
        methods: methods.to_vec(),
        center,
        local,
        training: training.sessions.clone(),
        models: models.iter().map(|m| m.to_record()).collect(),
        cells: cells.into_iter().flatten().collect(),
    })
}

/// Run the center and local sessions the methods need, then evaluate.
pub fn evaluate_methods(
    plan: &ExperimentPlan,
    training: &TrainingData,
    models: &[GpModel],
    methods: &[Method],
) -> Result<EvaluationReport> {
    let center = if methods.contains(&Method::Center) {
        Some(center_session(plan)?)
    } else {
        None
    };
    let local = if methods.contains(&Method::LocalIlc) {
        local_sessions(plan)?
    } else {
        Vec::new()
    };
    assemble_report(plan, training, models, methods, center, local)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_window_defaults_to_eight_of_twenty() {
        let plan = ExperimentPlan::example();
        assert_eq!(plan.ilc.trailing_window(), 8);
    }

    #[test]
    fn example_plan_is_valid() {
        ExperimentPlan::example().validate().unwrap();
        ExperimentPlan::periodic_example().validate().unwrap();
        assert_eq!(ExperimentPlan::periodic_example().parameter_labels().len(), 5);
    }

    #[test]
    fn plan_rejects_out_of_domain_positions() {
        let mut plan = ExperimentPlan::example();
        plan.test.push(vec![1.2]);
        assert!(plan.validate().is_err());
        let mut plan = ExperimentPlan::example();
        plan.training.truncate(1);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("bogus").is_err());
    }

    #[test]
    fn ideal_parameters_follow_mass_law() {
        let plan = ExperimentPlan::example();
        let p = plan.ideal_parameters(&[0.2]).unwrap();
        assert!((p[0] - crate::plant::spatial_mass_law(1.0, 0.2)).abs() < 1e-15);
    }
}
