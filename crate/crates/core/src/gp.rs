//! Gaussian-process regression of one feedforward parameter over position.
//!
//! Squared-exponential kernel with one lengthscale per position dimension,
//! exact posterior through a Cholesky factor of `K_y = K(P,P) + σ_n² I`, and
//! hyperparameters chosen by maximizing the log marginal likelihood or the
//! leave-one-out predictive probability.
//!
//! By default observations are centered by their empirical mean before
//! regression; the offset is restored on prediction.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;
const DUPLICATE_TOLERANCE: f64 = 1e-9;

/// Squared-exponential (ARD) covariance `σ_f² exp(−½ Σ_d ((ρ_d − ρ′_d)/ℓ_d)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl Kernel {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "lengthscales must be positive, got {lengthscales:?}"
            )));
        }
        Ok(Self {
            signal_variance,
            lengthscales,
        })
    }

    pub fn dimension(&self) -> usize {
        self.lengthscales.len()
    }

    /// Squared scaled distance `Σ_d ((a_d − b_d)/ℓ_d)²`.
    fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.dimension());
        debug_assert_eq!(b.len(), self.dimension());
        self.signal_variance * (-0.5 * self.scaled_distance(a, b)).exp()
    }

    pub fn gram(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(&a[i], &b[j]))
    }
}

pub fn kernel_eval(kernel: &Kernel, a: &[f64], b: &[f64]) -> f64 {
    kernel.eval(a, b)
}

/// Observations of one parameter at distinct positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub positions: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    /// Number of raw observations merged into each row.
    pub counts: Vec<usize>,
    pub parameter: usize,
}

impl TrainingSet {
    /// Rows closer than `1e-9` (max-norm) are merged by averaging.
    pub fn new(positions: Vec<Vec<f64>>, values: Vec<f64>, parameter: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("training set needs at least one row".into()));
        }
        if positions.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} positions but {} observations",
                positions.len(),
                values.len()
            )));
        }
        let dim = positions[0].len();
        if dim == 0 || positions.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch(
                "training positions must share a nonzero dimension".into(),
            ));
        }
        if positions.iter().flatten().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("training data must be finite".into()));
        }
        let mut merged_pos: Vec<Vec<f64>> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for (p, v) in positions.into_iter().zip(values) {
            let existing = merged_pos.iter().position(|q| {
                q.iter()
                    .zip(&p)
                    .all(|(a, b)| (a - b).abs() <= DUPLICATE_TOLERANCE)
            });
            match existing {
                Some(i) => {
                    sums[i] += v;
                    counts[i] += 1;
                }
                None => {
                    merged_pos.push(p);
                    sums.push(v);
                    counts.push(1);
                }
            }
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(s, c)| s / *c as f64)
            .collect();
        Ok(Self {
            positions: merged_pos,
            values,
            counts,
            parameter,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.positions[0].len()
    }

    pub fn merged_rows(&self) -> usize {
        self.counts.iter().map(|c| c - 1).sum()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.len() as f64
    }

    /// Per-dimension extent of the positions (1 where degenerate).
    pub fn extents(&self) -> Vec<f64> {
        (0..self.dimension())
            .map(|d| {
                let (lo, hi) = self
                    .positions
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                        (lo.min(p[d]), hi.max(p[d]))
                    });
                if hi - lo > 0.0 {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect()
    }
}

fn condition_estimate(matrix: &DMatrix<f64>) -> f64 {
    let eig = matrix.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Cholesky factor of `K_y` with escalating diagonal jitter.
fn factorize(k_y: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k_y.nrows();
    let mean_diag = k_y.diagonal().sum() / n as f64;
    let mut level = JITTER_START;
    while level <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = level * mean_diag;
        let mut m = k_y.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok((chol, jitter));
        }
        level *= 10.0;
    }
    Err(Error::Conditioning {
        condition: condition_estimate(k_y),
        context: format!("K_y of size {n} not positive definite after jitter up to {JITTER_MAX:e}·mean(diag)"),
    })
}

fn noisy_gram(kernel: &Kernel, noise_variance: f64, positions: &[Vec<f64>]) -> DMatrix<f64> {
    let mut k = kernel.gram(positions, positions);
    for i in 0..positions.len() {
        k[(i, i)] += noise_variance;
    }
    k
}

/// Outcome of hyperparameter optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective: Objective,
    pub objective_value: f64,
    pub log_marginal_likelihood: f64,
    /// Projected gradient norm at the optimum; absent when nothing was fitted.
    pub gradient_norm: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restart: usize,
    pub failed_restarts: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Fitted GP for one parameter, with cached factorization.
#[derive(Clone, Debug)]
pub struct GpModel {
    kernel: Kernel,
    noise_variance: f64,
    training: TrainingSet,
    offset: f64,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    fit: Option<FitReport>,
}

/// Posterior at test positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Diagonal entries that came out negative and were clamped to zero.
    pub clamped: usize,
}

impl Posterior {
    pub fn variance(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().copied().collect()
    }
}

impl GpModel {
    /// Model with the empirical-mean offset.
    pub fn new(kernel: Kernel, noise_variance: f64, training: TrainingSet) -> Result<Self> {
        let offset = training.mean();
        Self::with_offset(kernel, noise_variance, training, offset)
    }

    pub fn with_offset(
        kernel: Kernel,
        noise_variance: f64,
        training: TrainingSet,
        offset: f64,
    ) -> Result<Self> {
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise variance must be non-negative, got {noise_variance}"
            )));
        }
        if kernel.dimension() != training.dimension() {
            return Err(Error::DimensionMismatch(format!(
                "kernel of dimension {} for {}-dimensional positions",
                kernel.dimension(),
                training.dimension()
            )));
        }
        let k_y = noisy_gram(&kernel, noise_variance, &training.positions);
        let (factor, jitter) = factorize(&k_y)?;
        let centered = DVector::from_iterator(
            training.len(),
            training.values.iter().map(|v| v - offset),
        );
        let alpha = factor.solve(&centered);
        Ok(Self {
            kernel,
            noise_variance,
            training,
            offset,
            factor,
            alpha,
            jitter,
            fit: None,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn fit_report(&self) -> Option<&FitReport> {
        self.fit.as_ref()
    }

    /// `K_y` including the jitter actually used.
    pub fn k_y(&self) -> DMatrix<f64> {
        let mut k = noisy_gram(&self.kernel, self.noise_variance, &self.training.positions);
        for i in 0..k.nrows() {
            k[(i, i)] += self.jitter;
        }
        k
    }

    fn check_positions(&self, positions: &[Vec<f64>]) -> Result<()> {
        if let Some(p) = positions.iter().find(|p| p.len() != self.kernel.dimension()) {
            return Err(Error::DimensionMismatch(format!(
                "query position {p:?} for a {}-dimensional model",
                self.kernel.dimension()
            )));
        }
        Ok(())
    }

    /// Joint posterior mean and covariance.
    pub fn posterior(&self, positions: &[Vec<f64>]) -> Result<Posterior> {
        self.check_positions(positions)?;
        let k_star = self.kernel.gram(&self.training.positions, positions);
        let mean = (k_star.transpose() * &self.alpha)
            .iter()
            .map(|m| m + self.offset)
            .collect();
        let v = self
            .factor
            .l()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor is nonsingular");
        let mut covariance = self.kernel.gram(positions, positions) - v.transpose() * v;
        covariance = (&covariance + covariance.transpose()) * 0.5;
        let mut clamped = 0;
        for i in 0..positions.len() {
            if covariance[(i, i)] < 0.0 {
                covariance[(i, i)] = 0.0;
                clamped += 1;
            }
        }
        Ok(Posterior {
            mean,
            covariance,
            clamped,
        })
    }

    /// Pointwise posterior mean and variance, without forming the joint covariance.
    pub fn predict(&self, positions: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_positions(positions)?;
        let k_star = self.kernel.gram(&self.training.positions, positions);
        let mean = (k_star.transpose() * &self.alpha)
            .iter()
            .map(|m| m + self.offset)
            .collect();
        let v = self
            .factor
            .l()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor is nonsingular");
        let variance = positions
            .iter()
            .enumerate()
            .map(|(j, p)| (self.kernel.eval(p, p) - v.column(j).norm_squared()).max(0.0))
            .collect();
        Ok((mean, variance))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let centered = DVector::from_iterator(
            self.training.len(),
            self.training.values.iter().map(|v| v - self.offset),
        );
        lml_value(&self.factor, &self.alpha, &centered)
    }

    pub fn to_record(&self) -> GpModelRecord {
        GpModelRecord {
            schema_version: MODEL_SCHEMA_VERSION,
            parameter: self.training.parameter,
            kernel: self.kernel.clone(),
            noise_variance: self.noise_variance,
            offset: self.offset,
            training: self.training.clone(),
            fit: self.fit.clone(),
        }
    }

    pub fn from_record(record: GpModelRecord) -> Result<Self> {
        if record.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model schema version {}",
                record.schema_version
            )));
        }
        let mut model = Self::with_offset(
            record.kernel,
            record.noise_variance,
            record.training,
            record.offset,
        )?;
        model.fit = record.fit;
        Ok(model)
    }
}

/// Persisted form of a [`GpModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModelRecord {
    pub schema_version: u32,
    pub parameter: usize,
    pub kernel: Kernel,
    pub noise_variance: f64,
    pub offset: f64,
    pub training: TrainingSet,
    pub fit: Option<FitReport>,
}

pub fn posterior(model: &GpModel, positions: &[Vec<f64>]) -> Result<Posterior> {
    model.posterior(positions)
}

fn lml_value(factor: &Cholesky<f64, Dyn>, alpha: &DVector<f64>, centered: &DVector<f64>) -> f64 {
    let n = centered.len() as f64;
    let log_det_half: f64 = factor.l().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * centered.dot(alpha) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// Log marginal likelihood of the observations minus `offset`, and its
/// gradient with respect to `[ln σ_f², ln ℓ_1, …, ln ℓ_d, ln σ_n²]`.
pub fn log_marginal_likelihood(
    training: &TrainingSet,
    kernel: &Kernel,
    noise_variance: f64,
    offset: f64,
) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = lml_impl(training, kernel, noise_variance, offset, true)?;
    Ok((value, grad.expect("requested")))
}

fn check_dimension(training: &TrainingSet, kernel: &Kernel) -> Result<()> {
    if kernel.dimension() != training.dimension() {
        return Err(Error::DimensionMismatch(
            "kernel and training dimension differ".into(),
        ));
    }
    Ok(())
}

fn lml_impl(
    training: &TrainingSet,
    kernel: &Kernel,
    noise_variance: f64,
    offset: f64,
    gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_dimension(training, kernel)?;
    let l = training.len();
    let positions = &training.positions;
    let k_f = kernel.gram(positions, positions);
    let mut k_y = k_f.clone();
    for i in 0..l {
        k_y[(i, i)] += noise_variance;
    }
    let (factor, _) = factorize(&k_y)?;
    let centered = DVector::from_iterator(l, training.values.iter().map(|v| v - offset));
    let alpha = factor.solve(&centered);
    let value = lml_value(&factor, &alpha, &centered);
    if !gradient {
        return Ok((value, None));
    }

    // ½ tr((ααᵀ − K_y⁻¹) ∂K_y/∂η)
    let inner = &alpha * alpha.transpose() - factor.inverse();
    let dim = kernel.dimension();
    let mut grad = vec![0.0; dim + 2];
    grad[0] = 0.5 * inner.component_mul(&k_f).sum();
    for d in 0..dim {
        let ell2 = kernel.lengthscales[d].powi(2);
        let mut acc = 0.0;
        for i in 0..l {
            for j in 0..l {
                let diff = positions[i][d] - positions[j][d];
                acc += inner[(i, j)] * k_f[(i, j)] * diff * diff / ell2;
            }
        }
        grad[1 + d] = 0.5 * acc;
    }
    grad[dim + 1] = 0.5 * noise_variance * inner.trace();
    Ok((value, Some(grad)))
}

/// Derivatives of `K_y` with respect to `[ln σ_f², ln ℓ…, ln σ_n²]`.
fn gram_derivatives(kernel: &Kernel, noise_variance: f64, positions: &[Vec<f64>]) -> Vec<DMatrix<f64>> {
    let l = positions.len();
    let k_f = kernel.gram(positions, positions);
    let mut out = Vec::with_capacity(kernel.dimension() + 2);
    out.push(k_f.clone());
    for (d, ell) in kernel.lengthscales.iter().enumerate() {
        let ell2 = ell * ell;
        out.push(DMatrix::from_fn(l, l, |i, j| {
            let diff = positions[i][d] - positions[j][d];
            k_f[(i, j)] * diff * diff / ell2
        }));
    }
    out.push(DMatrix::identity(l, l) * noise_variance);
    out
}

/// Leave-one-out predictive log probability `Σ log p(θ_i | θ_−i)` of the
/// observations minus `offset`, and its gradient with respect to
/// `[ln σ_f², ln ℓ_1, …, ln ℓ_d, ln σ_n²]`.
pub fn leave_one_out(
    training: &TrainingSet,
    kernel: &Kernel,
    noise_variance: f64,
    offset: f64,
) -> Result<(f64, Vec<f64>)> {
    let (value, grad) = loo_impl(training, kernel, noise_variance, offset, true)?;
    Ok((value, grad.expect("requested")))
}

fn loo_impl(
    training: &TrainingSet,
    kernel: &Kernel,
    noise_variance: f64,
    offset: f64,
    gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_dimension(training, kernel)?;
    let l = training.len();
    let k_y = noisy_gram(kernel, noise_variance, &training.positions);
    let (factor, _) = factorize(&k_y)?;
    let inv = factor.inverse();
    let centered = DVector::from_iterator(l, training.values.iter().map(|v| v - offset));
    let alpha = &inv * &centered;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut value = 0.0;
    for i in 0..l {
        let kii = inv[(i, i)];
        if !(kii > 0.0) {
            return Err(Error::Conditioning {
                condition: condition_estimate(&k_y),
                context: "leave-one-out variance is not positive".into(),
            });
        }
        // σ_i² = 1/kii, residual α_i/kii.
        value += 0.5 * kii.ln() - 0.5 * alpha[i] * alpha[i] / kii - 0.5 * ln_2pi;
    }
    if !gradient {
        return Ok((value, None));
    }
    let grad = gram_derivatives(kernel, noise_variance, &training.positions)
        .iter()
        .map(|dk| {
            let z = &inv * dk;
            let z_alpha = &z * &alpha;
            (0..l)
                .map(|i| {
                    let kii = inv[(i, i)];
                    // [Z K_y⁻¹]_ii without forming the product.
                    let z_inv_ii = z.row(i).dot(&inv.column(i).transpose());
                    (alpha[i] * z_alpha[i] - 0.5 * (1.0 + alpha[i] * alpha[i] / kii) * z_inv_ii)
                        / kii
                })
                .sum()
        })
        .collect();
    Ok((value, Some(grad)))
}

/// Criterion maximized by [`fit_hyperparameters`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MarginalLikelihood,
    /// Leave-one-out predictive log probability. With a handful of nearly
    /// noiseless observations the marginal likelihood favors very confident
    /// fits; this criterion scores the predictive variances directly.
    LeaveOneOut,
}

impl Objective {
    /// Value, and the log-space gradient when `gradient` is set.
    pub fn evaluate(
        self,
        training: &TrainingSet,
        kernel: &Kernel,
        noise_variance: f64,
        offset: f64,
        gradient: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        match self {
            Objective::MarginalLikelihood => {
                lml_impl(training, kernel, noise_variance, offset, gradient)
            }
            Objective::LeaveOneOut => loo_impl(training, kernel, noise_variance, offset, gradient),
        }
    }
}

/// Constant prior mean of the regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMean {
    /// `m(ρ) = 0`.
    Zero,
    /// Observations centered by their empirical mean.
    #[default]
    Empirical,
}

impl PriorMean {
    pub fn offset(self, training: &TrainingSet) -> f64 {
        match self {
            PriorMean::Zero => 0.0,
            PriorMean::Empirical => training.mean(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Projected-gradient norm (log-space) at which a restart is converged.
    pub gradient_tolerance: f64,
    pub seed: u64,
    pub objective: Objective,
    pub prior_mean: PriorMean,
    /// Lower bound on the fitted σ_n², e.g. the known variance of the
    /// observations. Zero leaves only the degeneracy floor.
    pub noise_floor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iterations: 1000,
            gradient_tolerance: 1e-5,
            seed: 0,
            objective: Objective::MarginalLikelihood,
            prior_mean: PriorMean::Empirical,
            noise_floor: 0.0,
        }
    }
}

/// Log-space hyperparameter vector `[ln σ_f², ln ℓ…, ln σ_n²]` helpers.
struct Space {
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Space {
    fn unpack(&self, x: &[f64]) -> (Kernel, f64) {
        let kernel = Kernel {
            signal_variance: x[0].exp(),
            lengthscales: x[1..=self.dim].iter().map(|v| v.exp()).collect(),
        };
        (kernel, x[self.dim + 1].exp())
    }

    fn clamp(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Gradient with components pushing against an active bound removed.
    fn projected(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .zip(self.lower.iter().zip(&self.upper))
            .map(|((v, g), (lo, hi))| {
                if (*v <= *lo && *g < 0.0) || (*v >= *hi && *g > 0.0) {
                    0.0
                } else {
                    *g
                }
            })
            .collect()
    }
}

struct Ascent {
    x: Vec<f64>,
    value: f64,
    gradient_norm: f64,
    iterations: usize,
    converged: bool,
    stalled: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected quasi-Newton ascent inside the box. Coordinates held at a bound
/// by the gradient are frozen for the step; the inverse-Hessian estimate is
/// reset whenever its direction fails to ascend.
fn ascend(
    training: &TrainingSet,
    offset: f64,
    space: &Space,
    start: Vec<f64>,
    config: &OptimizerConfig,
) -> Result<Ascent> {
    let eval = |x: &[f64], gradient: bool| {
        let (k, s) = space.unpack(x);
        config.objective.evaluate(training, &k, s, offset, gradient)
    };
    let eval_full = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = eval(x, true)?;
        Ok((v, g.expect("requested")))
    };
    let n = start.len();
    let mut x = start;
    space.clamp(&mut x);
    let (mut value, mut grad) = eval_full(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;
    let mut stalled = false;
    let mut pg = space.projected(&x, &grad);
    while iterations < config.max_iterations {
        let pg_norm = dot(&pg, &pg).sqrt();
        if pg_norm <= config.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let free: Vec<bool> = pg.iter().zip(&grad).map(|(p, g)| *p != 0.0 || *g == 0.0).collect();
        let g_free = DVector::from_iterator(n, (0..n).map(|i| if free[i] { grad[i] } else { 0.0 }));
        let mut direction: Vec<f64> = (&h * &g_free)
            .iter()
            .enumerate()
            .map(|(i, d)| if free[i] { *d } else { 0.0 })
            .collect();
        if dot(&direction, &grad) <= 0.0 {
            h = DMatrix::identity(n, n);
            fresh = true;
            direction = g_free.iter().copied().collect();
        }
        // A fresh estimate has no curvature scale: cap the first step length.
        let mut t = if fresh {
            (0.1 / dot(&direction, &direction).sqrt()).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(&direction).map(|(v, d)| v + t * d).collect();
            space.clamp(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            let ascent = dot(&step, &grad);
            if let Ok((v, _)) = eval(&trial, false) {
                if v >= value + 1e-4 * ascent {
                    if let Ok((v, g)) = eval_full(&trial) {
                        accepted = Some((trial, v, g));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((x_new, v_new, g_new)) = accepted else {
            if !fresh {
                h = DMatrix::identity(n, n);
                fresh = true;
                continue;
            }
            // No ascent step along the gradient: stationary to working precision.
            converged = pg_norm <= config.gradient_tolerance * 1e3;
            stalled = !converged;
            break;
        };
        // BFGS update for the minimization of −value.
        let s_vec = DVector::from_iterator(n, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y_vec = DVector::from_iterator(n, grad.iter().zip(&g_new).map(|(a, b)| a - b));
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.norm() * y_vec.norm() {
            if fresh {
                h = DMatrix::identity(n, n) * (sy / y_vec.dot(&y_vec));
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s_vec * y_vec.transpose() * rho;
            let right = &eye - &y_vec * s_vec.transpose() * rho;
            h = left * h * right + &s_vec * s_vec.transpose() * rho;
            fresh = false;
        }
        x = x_new;
        value = v_new;
        grad = g_new;
        pg = space.projected(&x, &grad);
    }
    let gradient_norm = dot(&pg, &pg).sqrt();
    if gradient_norm <= config.gradient_tolerance {
        converged = true;
    }
    Ok(Ascent {
        x,
        value,
        gradient_norm,
        iterations,
        converged,
        stalled,
    })
}

/// Multi-start quasi-Newton ascent of the configured objective in log space.
pub fn fit_hyperparameters(training: &TrainingSet, config: &OptimizerConfig) -> Result<GpModel> {
    let dim = training.dimension();
    if !(config.noise_floor >= 0.0 && config.noise_floor.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise floor must be non-negative, got {}",
            config.noise_floor
        )));
    }
    let offset = config.prior_mean.offset(training);
    // Mean square of the regressed residual sets the scale of σ_f² and σ_n².
    let scale = (training.values.iter().map(|v| (v - offset).powi(2)).sum::<f64>()
        / training.len() as f64)
        .max(1e-12 * training.mean().powi(2))
        .max(f64::MIN_POSITIVE.sqrt());
    let noise_lower = (1e-12 * scale).max(config.noise_floor);
    let extents = training.extents();
    let mut warnings = Vec::new();

    if training.len() < 2 {
        warnings.push("single training row: returning prior-like defaults".to_string());
        // One observation carries no shape information; it becomes the offset.
        let kernel = Kernel::new(scale, extents.clone())?;
        let mut model = GpModel::new(kernel, noise_lower, training.clone())?;
        let value = model.log_marginal_likelihood();
        model.fit = Some(FitReport {
            objective: config.objective,
            objective_value: value,
            log_marginal_likelihood: value,
            gradient_norm: None,
            iterations: 0,
            converged: false,
            restart: 0,
            failed_restarts: 0,
            seed: config.seed,
            warnings,
        });
        return Ok(model);
    }

    let mut lower = vec![(1e-4 * scale).ln()];
    let mut upper = vec![(1e4 * scale).ln()];
    for e in &extents {
        lower.push((1e-2 * e).ln());
        upper.push((1e2 * e).ln());
    }
    lower.push(noise_lower.ln());
    upper.push((10.0 * scale).max(10.0 * noise_lower).ln());
    let space = Space { dim, lower, upper };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log_uniform = |lo: f64, hi: f64| rng.random_range(lo.ln()..=hi.ln());
    let starts: Vec<Vec<f64>> = (0..config.restarts.max(1))
        .map(|_| {
            let mut x = vec![log_uniform(0.1 * scale, 10.0 * scale)];
            for e in &extents {
                x.push(log_uniform(0.05 * e, 2.0 * e));
            }
            x.push(log_uniform(1e-6 * scale, scale));
            x
        })
        .collect();

    let results: Vec<Result<Ascent>> = starts
        .into_par_iter()
        .map(|s| ascend(training, offset, &space, s, config))
        .collect();
    let failed_restarts = results.iter().filter(|r| r.is_err()).count();
    let mut best: Option<(usize, Ascent)> = None;
    let mut last_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(a) => {
                if best.as_ref().is_none_or(|(_, b)| a.value > b.value) {
                    best = Some((i, a));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((restart, best)) = best else {
        return Err(last_err.unwrap_or(Error::Conditioning {
            condition: f64::INFINITY,
            context: "no optimizer restart succeeded".into(),
        }));
    };
    if !best.converged {
        let reason = if best.stalled {
            "line search stalled"
        } else {
            "iteration cap reached"
        };
        warnings.push(format!(
            "{reason} with projected gradient norm {:.3e}",
            best.gradient_norm
        ));
    }
    let (kernel, noise) = space.unpack(&best.x);
    let noise = noise.max(noise_lower);
    let mut model = GpModel::with_offset(kernel, noise, training.clone(), offset)?;
    model.fit = Some(FitReport {
        objective: config.objective,
        objective_value: best.value,
        log_marginal_likelihood: model.log_marginal_likelihood(),
        gradient_norm: Some(best.gradient_norm),
        iterations: best.iterations,
        converged: best.converged,
        restart,
        failed_restarts,
        seed: config.seed,
        warnings,
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn set_1d(xs: &[f64], ys: &[f64]) -> TrainingSet {
        TrainingSet::new(xs.iter().map(|x| vec![*x]).collect(), ys.to_vec(), 0).unwrap()
    }

    #[test]
    fn kernel_values() {
        let k = Kernel::new(1.0, vec![1.0]).unwrap();
        assert_eq!(kernel_eval(&k, &[0.3], &[0.3]), 1.0);
        assert_relative_eq!(kernel_eval(&k, &[0.0], &[1.0]), 0.6065306597126334, epsilon = 1e-12);
        assert!(kernel_eval(&k, &[0.0], &[100.0]) < 1e-100);
        let k2 = Kernel::new(2.0, vec![0.5, 3.0]).unwrap();
        assert_eq!(k2.eval(&[0.1, 0.2], &[0.4, -1.0]), k2.eval(&[0.4, -1.0], &[0.1, 0.2]));
    }

    #[test]
    fn invalid_kernel_rejected() {
        assert!(Kernel::new(0.0, vec![1.0]).is_err());
        assert!(Kernel::new(1.0, vec![]).is_err());
        assert!(Kernel::new(1.0, vec![-1.0]).is_err());
    }

    #[test]
    fn duplicates_are_merged() {
        let t = TrainingSet::new(
            vec![vec![0.0], vec![0.5], vec![0.0]],
            vec![1.0, 2.0, 3.0],
            0,
        )
        .unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.values, vec![2.0, 2.0]);
        assert_eq!(t.counts, vec![2, 1]);
        assert_eq!(t.merged_rows(), 1);
    }

    #[test]
    fn two_point_hand_case() {
        // P = {0, 1}, θ = {1, 2}, σ_f² = 1, ℓ = 1, σ_n² = 0.1, ρ* = 0.5.
        // Centered θ = {−0.5, 0.5}; K_y = [[1.1, c],[c, 1.1]], c = e^{−1/2};
        // k* = [e^{−1/8}, e^{−1/8}]. By symmetry k*ᵀK_y⁻¹(θ−1.5) = 0, so the
        // mean is 1.5, and the variance is 1 − 2 e^{−1/4} / (1.1 + c).
        let model = GpModel::new(
            Kernel::new(1.0, vec![1.0]).unwrap(),
            0.1,
            set_1d(&[0.0, 1.0], &[1.0, 2.0]),
        )
        .unwrap();
        let post = model.posterior(&[vec![0.5]]).unwrap();
        let c = (-0.5f64).exp();
        let variance = 1.0 - 2.0 * (-0.25f64).exp() / (1.1 + c);
        assert_relative_eq!(post.mean[0], 1.5, epsilon = 1e-9);
        assert_relative_eq!(post.covariance[(0, 0)], variance, epsilon = 1e-8);

        // Asymmetric query against the explicit 2×2 inverse.
        let q = 0.2f64;
        let ks = [(-0.5 * q * q).exp(), (-0.5 * (1.0 - q).powi(2)).exp()];
        let det = 1.1 * 1.1 - c * c;
        let inv = [[1.1 / det, -c / det], [-c / det, 1.1 / det]];
        let y = [-0.5, 0.5];
        let w = [
            inv[0][0] * y[0] + inv[0][1] * y[1],
            inv[1][0] * y[0] + inv[1][1] * y[1],
        ];
        let mean = 1.5 + ks[0] * w[0] + ks[1] * w[1];
        let quad = ks[0] * (inv[0][0] * ks[0] + inv[0][1] * ks[1])
            + ks[1] * (inv[1][0] * ks[0] + inv[1][1] * ks[1]);
        let post = model.posterior(&[vec![q]]).unwrap();
        assert_relative_eq!(post.mean[0], mean, epsilon = 1e-9);
        assert_relative_eq!(post.covariance[(0, 0)], 1.0 - quad, epsilon = 1e-8);
    }

    #[test]
    fn noiseless_interpolation_and_prior_reversion() {
        let xs = [0.0, 0.3, 0.7, 1.0];
        let ys = [1.0, 1.4, 0.9, 1.2];
        let model = GpModel::new(Kernel::new(0.5, vec![0.2]).unwrap(), 0.0, set_1d(&xs, &ys)).unwrap();
        let (mean, var) = model.predict(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>()).unwrap();
        for i in 0..4 {
            assert!((mean[i] - ys[i]).abs() < 1e-8);
            assert!(var[i] < 1e-8);
        }
        let (mean, var) = model.predict(&[vec![10.0]]).unwrap();
        assert_relative_eq!(mean[0], model.offset(), epsilon = 1e-12);
        assert_relative_eq!(var[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn alpha_solves_k_y() {
        let model = GpModel::new(
            Kernel::new(1.0, vec![0.3]).unwrap(),
            0.01,
            set_1d(&[0.0, 0.2, 0.5, 0.9], &[2.0, 1.0, 0.5, 3.0]),
        )
        .unwrap();
        let centered: Vec<f64> = model.training().values.iter().map(|v| v - model.offset()).collect();
        let r = model.k_y() * model.alpha();
        for (a, b) in r.iter().zip(&centered) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_point_zero_residual_likelihood() {
        let t = set_1d(&[0.4], &[3.0]);
        let (v, _) = log_marginal_likelihood(&t, &Kernel::new(1.0, vec![1.0]).unwrap(), 0.0, 3.0).unwrap();
        // The starting jitter contributes −½ log(1 + 1e−10).
        assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-9);
    }

    #[test]
    fn leave_one_out_gradient_matches_finite_differences() {
        let t = set_1d(&[0.0, 0.2, 0.45, 0.7, 1.0], &[0.9, 1.3, 1.1, 0.7, 1.05]);
        let x = [0.3f64.ln(), 0.35f64.ln(), 0.02f64.ln()];
        let f = |x: &[f64]| {
            let k = Kernel::new(x[0].exp(), vec![x[1].exp()]).unwrap();
            leave_one_out(&t, &k, x[2].exp(), 0.5).unwrap()
        };
        let (_, g) = f(&x);
        for i in 0..3 {
            let h = 1e-6;
            let mut up = x;
            let mut dn = x;
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up).0 - f(&dn).0) / (2.0 * h);
            assert_relative_eq!(g[i], fd, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn leave_one_out_of_two_points_by_hand() {
        // Each point is predicted from the other: mean c·θ_j, variance 1 + s − c²/(1 + s).
        let t = set_1d(&[0.0, 1.0], &[1.0, -0.5]);
        let k = Kernel::new(1.0, vec![1.0]).unwrap();
        let s = 0.1;
        let c = (-0.5f64).exp();
        let var = 1.0 + s - c * c / (1.0 + s);
        let logp = |y: f64, m: f64| -0.5 * (y - m).powi(2) / var - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        let mean = |y: f64| c * y / (1.0 + s);
        let expected = logp(1.0, mean(-0.5)) + logp(-0.5, mean(1.0));
        let (v, _) = leave_one_out(&t, &k, s, 0.0).unwrap();
        assert_relative_eq!(v, expected, max_relative = 1e-8);
    }

    #[test]
    fn likelihood_is_permutation_invariant() {
        let a = set_1d(&[0.0, 0.3, 0.8], &[1.0, -1.0, 0.4]);
        let b = set_1d(&[0.8, 0.0, 0.3], &[0.4, 1.0, -1.0]);
        let k = Kernel::new(0.7, vec![0.4]).unwrap();
        let (va, ga) = log_marginal_likelihood(&a, &k, 0.05, 0.1).unwrap();
        let (vb, gb) = log_marginal_likelihood(&b, &k, 0.05, 0.1).unwrap();
        assert_relative_eq!(va, vb, epsilon = 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert_relative_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn constant_observations_fit_flat() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let t = set_1d(&xs, &[0.8; 6]);
        let model = fit_hyperparameters(&t, &OptimizerConfig::default()).unwrap();
        let (mean, _) = model.predict(&[vec![0.33], vec![0.71]]).unwrap();
        for m in mean {
            assert_relative_eq!(m, 0.8, max_relative = 1e-5);
        }
        assert!(model.noise_variance() <= 1e-6);

        let centered = OptimizerConfig {
            prior_mean: PriorMean::Empirical,
            ..OptimizerConfig::default()
        };
        let model = fit_hyperparameters(&t, &centered).unwrap();
        let (mean, _) = model.predict(&[vec![0.33], vec![0.71]]).unwrap();
        for m in mean {
            assert_relative_eq!(m, 0.8, epsilon = 1e-9);
        }
    }

    #[test]
    fn duplicate_rows_fit() {
        let t = TrainingSet::new(
            vec![vec![0.0], vec![0.5], vec![0.5], vec![1.0]],
            vec![1.0, 2.0, 2.2, 1.5],
            0,
        )
        .unwrap();
        let model = fit_hyperparameters(&t, &OptimizerConfig::default()).unwrap();
        assert_eq!(model.training().len(), 3);
    }

    #[test]
    fn single_row_returns_defaults_with_warning() {
        let model = fit_hyperparameters(&set_1d(&[0.5], &[2.0]), &OptimizerConfig::default()).unwrap();
        let report = model.fit_report().unwrap();
        assert!(!report.warnings.is_empty());
        let (mean, _) = model.predict(&[vec![0.9]]).unwrap();
        assert_relative_eq!(mean[0], 2.0);
    }

    #[test]
    fn noise_floor_bounds_fitted_noise() {
        let t = set_1d(&[0.0, 0.3, 0.6, 1.0], &[1.0, 1.2, 1.1, 0.9]);
        let config = OptimizerConfig {
            noise_floor: 1e-3,
            ..OptimizerConfig::default()
        };
        let model = fit_hyperparameters(&t, &config).unwrap();
        assert!(model.noise_variance() >= 1e-3);
        let bad = OptimizerConfig {
            noise_floor: -1.0,
            ..OptimizerConfig::default()
        };
        assert!(fit_hyperparameters(&t, &bad).is_err());
    }

    #[test]
    fn record_round_trip() {
        let t = set_1d(&[0.0, 0.4, 1.0], &[1.0, 2.0, 1.5]);
        let model = fit_hyperparameters(&t, &OptimizerConfig::default()).unwrap();
        let json = serde_json::to_string(&model.to_record()).unwrap();
        let back = GpModel::from_record(serde_json::from_str(&json).unwrap()).unwrap();
        let q = vec![vec![0.25], vec![0.8]];
        assert_eq!(model.predict(&q).unwrap(), back.predict(&q).unwrap());
    }
}
