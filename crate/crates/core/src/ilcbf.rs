//! Norm-optimal iterative learning control with basis functions at a fixed
//! position.
//!
//! Each trial minimizes
//! `V(θ) = w_e‖e_{j+1}‖² + w_f‖Ψθ‖² + w_Δf‖Ψ(θ − θ_j)‖²` under the nominal
//! error propagation `e_{j+1} = e_j − J Ψ (θ − θ_j)`, where `J` is the lifted
//! process sensitivity `S G₀`. The closed-form minimizer is
//! `θ_{j+1} = L e_j + Q θ_j`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{
    lift, process_sensitivity, simulate_closed_loop, DiscreteTransferFunction,
    FeedbackController, LiftedOperator, NoiseSpec, SpatialPlant,
};
use crate::seed;
use crate::trajectory::{BasisMatrix, Reference};

/// How the scalar effort weights are interpreted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScaling {
    /// `W_f = w_f·γ·I` and `W_Δf = w_Δf·γ·I` with `γ = ‖JΨ‖²_F / ‖Ψ‖²_F`,
    /// which makes `w_f`, `w_Δf` dimensionless relative to `w_e`.
    #[default]
    Relative,
    /// `W_f = w_f·I`, `W_Δf = w_Δf·I` in signal units.
    Absolute,
}

/// Scalar-times-identity weights `W_e = w_e I`, `W_f`, `W_Δf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlcWeights {
    pub error: f64,
    pub effort: f64,
    pub effort_change: f64,
    #[serde(default)]
    pub scaling: WeightScaling,
}

impl Default for IlcWeights {
    fn default() -> Self {
        Self {
            error: 1.0,
            effort: 1e-8,
            effort_change: 0.0,
            scaling: WeightScaling::Relative,
        }
    }
}

impl IlcWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.error > 0.0 && self.error.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "W_e must be positive definite (w_e = {})",
                self.error
            )));
        }
        if !(self.effort >= 0.0 && self.effort_change >= 0.0)
            || !self.effort.is_finite()
            || !self.effort_change.is_finite()
        {
            return Err(Error::InvalidInput(format!(
                "W_f and W_Δf must be positive semidefinite (w_f = {}, w_Δf = {})",
                self.effort, self.effort_change
            )));
        }
        Ok(())
    }
}

/// Cached `L`, `Q`, `R` for one basis and nominal model.
#[derive(Clone, Debug)]
pub struct IlcUpdateLaw {
    learning: DMatrix<f64>,
    robustness: DMatrix<f64>,
    hessian: DMatrix<f64>,
    /// Stacked `J Ψ`, `(axes·N) × n_θ`.
    process_basis: DMatrix<f64>,
    /// Stacked `Ψ`, `(axes·N) × n_θ`.
    basis: DMatrix<f64>,
    error_weight: f64,
    effort_weight: f64,
    change_weight: f64,
    condition: f64,
    axes: usize,
    trial_length: usize,
}

fn stack_signals(signals: &[Vec<f64>], axes: usize, n: usize) -> Result<DVector<f64>> {
    if signals.len() != axes || signals.iter().any(|s| s.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "expected {axes} signals of length {n}"
        )));
    }
    Ok(DVector::from_iterator(
        axes * n,
        signals.iter().flat_map(|s| s.iter().copied()),
    ))
}

impl IlcUpdateLaw {
    /// `L`, `n_θ × (axes·N)`.
    pub fn learning(&self) -> &DMatrix<f64> {
        &self.learning
    }

    /// `Q`, `n_θ × n_θ`.
    pub fn robustness(&self) -> &DMatrix<f64> {
        &self.robustness
    }

    /// `R`, `n_θ × n_θ`.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn process_basis(&self) -> &DMatrix<f64> {
        &self.process_basis
    }

    /// Condition number of `R`.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn n_params(&self) -> usize {
        self.hessian.nrows()
    }

    /// Effective `(w_e, w_f, w_Δf)` after scaling.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        (self.error_weight, self.effort_weight, self.change_weight)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "parameter vector of length {} for {} parameters",
                theta.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    /// Nominal-model criterion for candidate `θ` given the measured trial
    /// `(e_j, θ_j)`.
    pub fn predicted_criterion(
        &self,
        error: &[Vec<f64>],
        theta_prev: &[f64],
        theta: &[f64],
    ) -> Result<f64> {
        self.check_theta(theta_prev)?;
        self.check_theta(theta)?;
        let e = stack_signals(error, self.axes, self.trial_length)?;
        let theta = DVector::from_column_slice(theta);
        let delta = &theta - DVector::from_column_slice(theta_prev);
        let predicted = e - &self.process_basis * &delta;
        let f = &self.basis * &theta;
        let df = &self.basis * &delta;
        Ok(self.error_weight * predicted.norm_squared()
            + self.effort_weight * f.norm_squared()
            + self.change_weight * df.norm_squared())
    }

    /// Measured criterion of a trial.
    pub fn trial_criterion(&self, error: &[Vec<f64>], f: &[Vec<f64>], f_prev: &[Vec<f64>]) -> f64 {
        let sq = |s: &[Vec<f64>]| s.iter().flatten().map(|x| x * x).sum::<f64>();
        let change: f64 = f
            .iter()
            .flatten()
            .zip(f_prev.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.error_weight * sq(error) + self.effort_weight * sq(f) + self.change_weight * change
    }
}

pub fn build_update_law(
    basis: &BasisMatrix,
    process: &[LiftedOperator],
    weights: &IlcWeights,
) -> Result<IlcUpdateLaw> {
    weights.validate()?;
    let axes = basis.axes();
    let n = basis.len();
    if process.len() != axes {
        return Err(Error::DimensionMismatch(format!(
            "{} lifted process operators for {axes} axes",
            process.len()
        )));
    }
    if let Some(p) = process.iter().find(|p| p.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "lifted process of size {} for trial length {n}",
            p.len()
        )));
    }
    let n_theta = basis.n_params();
    let mut stacked_basis = DMatrix::<f64>::zeros(axes * n, n_theta);
    let mut process_basis = DMatrix::<f64>::zeros(axes * n, n_theta);
    for (axis, operator) in process.iter().enumerate() {
        let idx = basis.axis_parameters(axis);
        if idx.is_empty() {
            continue;
        }
        let psi = basis.axis_matrix(axis);
        let j_psi = operator.matrix() * &psi;
        for (c, &param) in idx.iter().enumerate() {
            stacked_basis
                .view_mut((axis * n, param), (n, 1))
                .copy_from(&psi.column(c));
            process_basis
                .view_mut((axis * n, param), (n, 1))
                .copy_from(&j_psi.column(c));
        }
    }

    let gamma = match weights.scaling {
        WeightScaling::Absolute => 1.0,
        WeightScaling::Relative => {
            let psi_energy = stacked_basis.norm_squared();
            if psi_energy == 0.0 {
                return Err(Error::SingularUpdate {
                    condition: f64::INFINITY,
                });
            }
            process_basis.norm_squared() / psi_energy
        }
    };
    let error_weight = weights.error;
    let effort_weight = weights.effort * gamma;
    let change_weight = weights.effort_change * gamma;

    let process_gram = process_basis.transpose() * &process_basis;
    let basis_gram = stacked_basis.transpose() * &stacked_basis;
    let hessian = &process_gram * error_weight + &basis_gram * (effort_weight + change_weight);

    let eigen = hessian.clone().symmetric_eigenvalues();
    let (lo, hi) = eigen
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(lo > 1e-13 * hi) {
        return Err(Error::SingularUpdate { condition });
    }
    let factor: Cholesky<f64, Dyn> = hessian
        .clone()
        .cholesky()
        .ok_or(Error::SingularUpdate { condition })?;

    let learning = factor.solve(&(process_basis.transpose() * error_weight));
    let robustness = factor.solve(&(&process_gram * error_weight + &basis_gram * change_weight));

    Ok(IlcUpdateLaw {
        learning,
        robustness,
        hessian,
        process_basis,
        basis: stacked_basis,
        error_weight,
        effort_weight,
        change_weight,
        condition,
        axes,
        trial_length: n,
    })
}

/// `θ_{j+1} = L e_j + Q θ_j`.
pub fn update_parameters(law: &IlcUpdateLaw, error: &[Vec<f64>], theta: &[f64]) -> Result<Vec<f64>> {
    law.check_theta(theta)?;
    let e = stack_signals(error, law.axes, law.trial_length)?;
    let next = &law.learning * e + &law.robustness * DVector::from_column_slice(theta);
    Ok(next.iter().copied().collect())
}

/// Which nominal model `G₀` the learning law is built from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// `G₀ = G(ρ)` at the learning position.
    #[default]
    Exact,
    /// `G₀ = G(ρ_nominal)`, one model for every position.
    AtPosition(Vec<f64>),
    /// Explicit per-axis model.
    Custom(Vec<DiscreteTransferFunction>),
}

impl ModelChoice {
    pub fn resolve(
        &self,
        plant: &SpatialPlant,
        position: &[f64],
    ) -> Result<Vec<DiscreteTransferFunction>> {
        match self {
            Self::Exact => plant.evaluate(position),
            Self::AtPosition(p) => plant.evaluate(p),
            Self::Custom(tfs) => {
                if tfs.len() != plant.axes() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} model axes for a {}-axis plant",
                        tfs.len(),
                        plant.axes()
                    )));
                }
                Ok(tfs.clone())
            }
        }
    }
}

/// Lifted `S G₀` per axis, each formed from the composed rational system.
pub fn lifted_process(
    model: &[DiscreteTransferFunction],
    controllers: &[FeedbackController],
    trial_length: usize,
) -> Result<Vec<LiftedOperator>> {
    if model.len() != controllers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} model axes but {} controllers",
            model.len(),
            controllers.len()
        )));
    }
    model
        .iter()
        .zip(controllers)
        .map(|(g, c)| lift(&process_sensitivity(g, c)?, trial_length))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub weights: IlcWeights,
    pub trials: usize,
    /// Initial parameters; zero when absent.
    pub theta0: Option<Vec<f64>>,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub model: ModelChoice,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            weights: IlcWeights::default(),
            trials: 20,
            theta0: None,
            noise: NoiseSpec::off(),
            seed: 0,
            model: ModelChoice::Exact,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub theta: Vec<f64>,
    pub feedforward: Vec<Vec<f64>>,
    pub error: Vec<Vec<f64>>,
    pub error_norm: f64,
    /// Measured criterion `V(θ_j)`.
    pub criterion: f64,
}

/// Trial history at one position. `history[j]` holds `θ_j` and the trial
/// run with it; a session of `trials` updates has `trials + 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlcSession {
    pub position: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub update_condition: f64,
    pub history: Vec<TrialRecord>,
}

impl IlcSession {
    pub fn final_theta(&self) -> &[f64] {
        &self.history.last().expect("session has at least one trial").theta
    }

    pub fn error_norms(&self) -> Vec<f64> {
        self.history.iter().map(|t| t.error_norm).collect()
    }

    /// `‖θ_J − θ_{J−1}‖ / ‖θ_J‖`.
    pub fn relative_change(&self) -> f64 {
        let n = self.history.len();
        if n < 2 {
            return f64::NAN;
        }
        let (a, b) = (&self.history[n - 1].theta, &self.history[n - 2].theta);
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    /// Mean of `θ_j` over the last `window` entries of the history.
    pub fn trailing_mean(&self, window: usize) -> Vec<f64> {
        let window = window.clamp(1, self.history.len());
        let tail = &self.history[self.history.len() - window..];
        let mut mean = vec![0.0; tail[0].theta.len()];
        for record in tail {
            for (m, t) in mean.iter_mut().zip(&record.theta) {
                *m += t;
            }
        }
        mean.iter_mut().for_each(|m| *m /= window as f64);
        mean
    }
}

/// Run `trials` learning updates at `position`.
pub fn run_session(
    plant: &SpatialPlant,
    position: &[f64],
    controllers: &[FeedbackController],
    reference: &Reference,
    basis: &BasisMatrix,
    config: &SessionConfig,
) -> Result<IlcSession> {
    run_session_inner(plant, position, controllers, reference, basis, config)
        .map_err(|e| e.at(position))
}

fn run_session_inner(
    plant: &SpatialPlant,
    position: &[f64],
    controllers: &[FeedbackController],
    reference: &Reference,
    basis: &BasisMatrix,
    config: &SessionConfig,
) -> Result<IlcSession> {
    if config.trials == 0 {
        return Err(Error::InvalidInput("a session needs at least one trial".into()));
    }
    plant.domain.check(position)?;
    if basis.len() != reference.len() || basis.axes() != reference.axes() {
        return Err(Error::DimensionMismatch(
            "basis and reference disagree in length or axes".into(),
        ));
    }
    let model = config.model.resolve(plant, position)?;
    let process = lifted_process(&model, controllers, reference.len())?;
    let law = build_update_law(basis, &process, &config.weights)?;

    let mut theta = match &config.theta0 {
        Some(t) => {
            law.check_theta(t)?;
            t.clone()
        }
        None => vec![0.0; basis.n_params()],
    };
    let mut history = Vec::with_capacity(config.trials + 1);
    let mut f_prev: Option<Vec<Vec<f64>>> = None;
    for trial in 0..=config.trials {
        let f = basis.feedforward(&theta)?;
        let response = simulate_closed_loop(
            plant,
            position,
            controllers,
            reference.signals(),
            &f,
            &config.noise,
            seed::trial(config.seed, trial),
        )?;
        let criterion = law.trial_criterion(&response.e, &f, f_prev.as_ref().unwrap_or(&f));
        let error_norm = response.error_norm();
        let next = if trial < config.trials {
            Some(update_parameters(&law, &response.e, &theta)?)
        } else {
            None
        };
        history.push(TrialRecord {
            trial,
            theta: theta.clone(),
            feedforward: f.clone(),
            error: response.e,
            error_norm,
            criterion,
        });
        f_prev = Some(f);
        if let Some(next) = next {
            theta = next;
        }
    }
    Ok(IlcSession {
        position: position.to_vec(),
        trials: config.trials,
        seed: config.seed,
        update_condition: law.condition(),
        history,
    })
}
