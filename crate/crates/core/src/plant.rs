//! Discrete-time transfer functions, spatially distributed plants, feedback
//! controllers, closed-loop simulation and lifted trial-domain operators.
//!
//! All rational systems are polynomials in the backward-shift operator
//! `q⁻¹`: `H(q⁻¹) = (b₀ + b₁q⁻¹ + …) / (a₀ + a₁q⁻¹ + …)`. Every trial starts
//! from zero initial conditions.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rational discrete-time LTI system in powers of `q⁻¹`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTransferFunction {
    numerator: Vec<f64>,
    denominator: Vec<f64>,
    sample_time: f64,
}

impl DiscreteTransferFunction {
    pub fn new(numerator: Vec<f64>, denominator: Vec<f64>, sample_time: f64) -> Result<Self> {
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return Err(Error::InvalidSystem(format!(
                "sample time must be positive, got {sample_time}"
            )));
        }
        if denominator.first().is_none_or(|a0| *a0 == 0.0) {
            return Err(Error::InvalidSystem(
                "leading denominator coefficient must be nonzero".into(),
            ));
        }
        if numerator.iter().chain(&denominator).any(|c| !c.is_finite()) {
            return Err(Error::InvalidSystem("coefficients must be finite".into()));
        }
        let numerator = if numerator.is_empty() {
            vec![0.0]
        } else {
            numerator
        };
        Ok(Self {
            numerator: trim_trailing(numerator),
            denominator: trim_trailing(denominator),
            sample_time,
        })
    }

    pub fn gain(gain: f64, sample_time: f64) -> Result<Self> {
        Self::new(vec![gain], vec![1.0], sample_time)
    }

    /// One-sample delay `q⁻¹`.
    pub fn delay(sample_time: f64) -> Result<Self> {
        Self::new(vec![0.0, 1.0], vec![1.0], sample_time)
    }

    /// Finite-difference mass-damper `k / (m δ² + d δ)` with `δ = (1 − q⁻¹)/T_s`.
    pub fn mass_damper(mass: f64, damping: f64, gain: f64, sample_time: f64) -> Result<Self> {
        if !(mass > 0.0) || damping < 0.0 {
            return Err(Error::InvalidSystem(format!(
                "mass must be positive and damping non-negative (m={mass}, d={damping})"
            )));
        }
        let ts = sample_time;
        Self::new(
            vec![gain * ts * ts],
            vec![mass + damping * ts, -2.0 * mass - damping * ts, mass],
            ts,
        )
    }

    pub fn numerator(&self) -> &[f64] {
        &self.numerator
    }

    pub fn denominator(&self) -> &[f64] {
        &self.denominator
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn is_zero(&self) -> bool {
        self.numerator.iter().all(|b| *b == 0.0)
    }

    /// Direct feedthrough `b₀ / a₀`.
    pub fn feedthrough(&self) -> f64 {
        self.numerator[0] / self.denominator[0]
    }

    /// Zero-initial-condition response of the difference equation.
    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        let mut state = DifferenceEquation::new(self);
        input
            .iter()
            .map(|&x| {
                let y = state.free_response() + state.b0 * x;
                state.push(x, y);
                y
            })
            .collect()
    }

    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut impulse = vec![0.0; len];
        if let Some(first) = impulse.first_mut() {
            *first = 1.0;
        }
        self.filter(&impulse)
    }

    /// Series connection `self · other`.
    pub fn series(&self, other: &Self) -> Result<Self> {
        check_same_rate(self, other)?;
        Self::new(
            poly_mul(&self.numerator, &other.numerator),
            poly_mul(&self.denominator, &other.denominator),
            self.sample_time,
        )
    }

    /// `H(e^{iωT_s})` for angular frequency `omega` in rad/s.
    pub fn frequency_response(&self, omega: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -omega * self.sample_time);
        poly_eval(&self.numerator, z_inv) / poly_eval(&self.denominator, z_inv)
    }

    /// Roots of the denominator in the `z` plane.
    pub fn poles(&self) -> Vec<Complex64> {
        polynomial_roots(&self.denominator)
    }
}

/// Streaming form of a difference equation, normalized by `a₀`.
#[derive(Clone, Debug)]
struct DifferenceEquation {
    b0: f64,
    b: Vec<f64>,
    a: Vec<f64>,
    inputs: Vec<f64>,
    outputs: Vec<f64>,
}

impl DifferenceEquation {
    fn new(sys: &DiscreteTransferFunction) -> Self {
        let a0 = sys.denominator[0];
        let b: Vec<f64> = sys.numerator.iter().map(|c| c / a0).collect();
        let a: Vec<f64> = sys.denominator.iter().map(|c| c / a0).collect();
        Self {
            b0: b[0],
            inputs: vec![0.0; b.len().saturating_sub(1)],
            outputs: vec![0.0; a.len().saturating_sub(1)],
            b,
            a,
        }
    }

    /// Output contribution of past inputs and outputs (excludes `b₀ x(k)`).
    fn free_response(&self) -> f64 {
        let past_in: f64 = self.b[1..]
            .iter()
            .zip(&self.inputs)
            .map(|(b, x)| b * x)
            .sum();
        let past_out: f64 = self.a[1..]
            .iter()
            .zip(&self.outputs)
            .map(|(a, y)| a * y)
            .sum();
        past_in - past_out
    }

    fn push(&mut self, x: f64, y: f64) {
        if !self.inputs.is_empty() {
            self.inputs.rotate_right(1);
            self.inputs[0] = x;
        }
        if !self.outputs.is_empty() {
            self.outputs.rotate_right(1);
            self.outputs[0] = y;
        }
    }
}

fn trim_trailing(mut coeffs: Vec<f64>) -> Vec<f64> {
    while coeffs.len() > 1 && coeffs.last() == Some(&0.0) {
        coeffs.pop();
    }
    coeffs
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += y;
    }
    out
}

fn poly_eval(coeffs: &[f64], z_inv: Complex64) -> Complex64 {
    coeffs
        .iter()
        .rev()
        .fold(Complex64::new(0.0, 0.0), |acc, c| acc * z_inv + c)
}

/// Roots in `z` of `c₀ + c₁ z⁻¹ + … + cₙ z⁻ⁿ`, via companion-matrix eigenvalues.
pub fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let coeffs = trim_trailing(coeffs.to_vec());
    let degree = coeffs.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let lead = coeffs[0];
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for j in 0..degree {
        companion[(0, j)] = -coeffs[j + 1] / lead;
    }
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    companion.complex_eigenvalues().iter().copied().collect()
}

fn check_same_rate(a: &DiscreteTransferFunction, b: &DiscreteTransferFunction) -> Result<()> {
    if (a.sample_time - b.sample_time).abs() > 1e-12 * a.sample_time.max(b.sample_time) {
        return Err(Error::InvalidSystem(format!(
            "sample times differ ({} vs {})",
            a.sample_time, b.sample_time
        )));
    }
    Ok(())
}

/// Axis-aligned box of valid positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl DomainBox {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || min.is_empty() {
            return Err(Error::InvalidInput(
                "domain bounds must be nonempty and of equal dimension".into(),
            ));
        }
        if min.iter().zip(&max).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidInput(format!(
                "domain minimum {min:?} exceeds maximum {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn unit(dimension: usize) -> Self {
        Self {
            min: vec![0.0; dimension],
            max: vec![1.0; dimension],
        }
    }

    pub fn dimension(&self) -> usize {
        self.min.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn check(&self, position: &[f64]) -> Result<()> {
        let inside = position.len() == self.dimension()
            && position
                .iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(p, (lo, hi))| *p >= *lo && *p <= *hi);
        if inside {
            Ok(())
        } else {
            Err(Error::OutOfDomain {
                position: position.to_vec(),
                min: self.min.clone(),
                max: self.max.clone(),
            })
        }
    }
}

/// Built-in position-dependent plant families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantKind {
    /// Single axis, pure mass `m̄(1 − 2(½ − ρ)²)`.
    SpatialMass { nominal_mass: f64 },
    /// Single axis, position-independent mass-damper.
    MassDamper { mass: f64, damping: f64 },
    /// Two decoupled mass-damper axes. Axis 1 has actuator gain
    /// `1 + ripple·cos(2πρ₁/pitch)`; axis 2 has mass `m₂(1 + mass_slope·ρ₂)`.
    PeriodicFlux {
        masses: [f64; 2],
        dampings: [f64; 2],
        pitch: f64,
        ripple: f64,
        mass_slope: f64,
    },
}

/// Per-axis physical parameters at a frozen position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisParameters {
    pub mass: f64,
    pub damping: f64,
    pub gain: f64,
}

/// Spatially distributed LTI plant `G(ρ, q⁻¹)`, diagonal over axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialPlant {
    pub kind: PlantKind,
    pub sample_time: f64,
    pub domain: DomainBox,
}

impl SpatialPlant {
    pub fn new(kind: PlantKind, sample_time: f64, domain: DomainBox) -> Result<Self> {
        if !(sample_time > 0.0) {
            return Err(Error::InvalidSystem("sample time must be positive".into()));
        }
        let expected_dim = match kind {
            PlantKind::PeriodicFlux { .. } => 2,
            _ => 1,
        };
        if domain.dimension() != expected_dim {
            return Err(Error::InvalidInput(format!(
                "plant expects a {expected_dim}-dimensional domain, got {}",
                domain.dimension()
            )));
        }
        match kind {
            PlantKind::SpatialMass { nominal_mass } if !(nominal_mass > 0.0) => {
                return Err(Error::InvalidSystem("nominal mass must be positive".into()));
            }
            PlantKind::MassDamper { mass, damping } if !(mass > 0.0) || damping < 0.0 => {
                return Err(Error::InvalidSystem(
                    "mass must be positive and damping non-negative".into(),
                ));
            }
            PlantKind::PeriodicFlux {
                masses,
                dampings,
                pitch,
                ripple,
                ..
            } if masses.iter().any(|m| !(*m > 0.0))
                || dampings.iter().any(|d| *d < 0.0)
                || !(pitch > 0.0)
                || !(ripple.abs() < 1.0) =>
            {
                return Err(Error::InvalidSystem(
                    "periodic-flux plant needs positive masses and pitch, and |ripple| < 1".into(),
                ));
            }
            _ => {}
        }
        let plant = Self {
            kind,
            sample_time,
            domain,
        };
        // Every position inside the box has to give a positive mass.
        if let PlantKind::PeriodicFlux { mass_slope, .. } = plant.kind {
            let lo = 1.0 + mass_slope * plant.domain.min[1];
            let hi = 1.0 + mass_slope * plant.domain.max[1];
            if lo <= 0.0 || hi <= 0.0 {
                return Err(Error::InvalidSystem(
                    "axis-2 mass becomes non-positive inside the domain".into(),
                ));
            }
        }
        if let PlantKind::SpatialMass { .. } = plant.kind {
            let ok = [plant.domain.min[0], plant.domain.max[0]]
                .iter()
                .all(|r| 1.0 - 2.0 * (0.5 - r).powi(2) > 0.0);
            if !ok {
                return Err(Error::InvalidSystem(
                    "spatial mass becomes non-positive inside the domain".into(),
                ));
            }
        }
        Ok(plant)
    }

    /// The example plant with spatially distributed mass on `ρ ∈ [0, 1]`.
    pub fn spatial_mass(nominal_mass: f64, sample_time: f64) -> Result<Self> {
        Self::new(
            PlantKind::SpatialMass { nominal_mass },
            sample_time,
            DomainBox::unit(1),
        )
    }

    pub fn axes(&self) -> usize {
        match self.kind {
            PlantKind::PeriodicFlux { .. } => 2,
            _ => 1,
        }
    }

    pub fn axis_parameters(&self, position: &[f64]) -> Result<Vec<AxisParameters>> {
        self.domain.check(position)?;
        Ok(match self.kind {
            PlantKind::SpatialMass { nominal_mass } => vec![AxisParameters {
                mass: spatial_mass_law(nominal_mass, position[0]),
                damping: 0.0,
                gain: 1.0,
            }],
            PlantKind::MassDamper { mass, damping } => vec![AxisParameters {
                mass,
                damping,
                gain: 1.0,
            }],
            PlantKind::PeriodicFlux {
                masses,
                dampings,
                pitch,
                ripple,
                mass_slope,
            } => vec![
                AxisParameters {
                    mass: masses[0],
                    damping: dampings[0],
                    gain: 1.0 + ripple * (std::f64::consts::TAU * position[0] / pitch).cos(),
                },
                AxisParameters {
                    mass: masses[1] * (1.0 + mass_slope * position[1]),
                    damping: dampings[1],
                    gain: 1.0,
                },
            ],
        })
    }

    /// Frozen per-axis dynamics `G(ρ, q⁻¹)`.
    pub fn evaluate(&self, position: &[f64]) -> Result<Vec<DiscreteTransferFunction>> {
        self.axis_parameters(position)?
            .iter()
            .map(|p| DiscreteTransferFunction::mass_damper(p.mass, p.damping, p.gain, self.sample_time))
            .collect()
    }

    /// Per-axis mass used to scale the default controllers.
    pub fn nominal_masses(&self) -> Vec<f64> {
        match self.kind {
            PlantKind::SpatialMass { nominal_mass } => vec![nominal_mass],
            PlantKind::MassDamper { mass, .. } => vec![mass],
            PlantKind::PeriodicFlux { masses, .. } => masses.to_vec(),
        }
    }
}

/// Effective mass of the example plant, `m̄(1 − 2(½ − ρ)²)`.
pub fn spatial_mass_law(nominal_mass: f64, position: f64) -> f64 {
    nominal_mass * (1.0 - 2.0 * (0.5 - position).powi(2))
}

/// Feedback controller `C(q⁻¹)` for one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackController {
    pub tf: DiscreteTransferFunction,
}

/// Tuning of the default PD controller with filtered derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerTuning {
    pub bandwidth_hz: f64,
    pub damping_ratio: f64,
    /// Derivative filter pole as a multiple of the bandwidth.
    pub derivative_filter_ratio: f64,
}

impl Default for ControllerTuning {
    fn default() -> Self {
        Self {
            bandwidth_hz: 20.0,
            damping_ratio: 0.7,
            derivative_filter_ratio: 10.0,
        }
    }
}

impl FeedbackController {
    pub fn new(tf: DiscreteTransferFunction) -> Self {
        Self { tf }
    }

    pub fn zero(sample_time: f64) -> Result<Self> {
        Ok(Self::new(DiscreteTransferFunction::gain(0.0, sample_time)?))
    }

    /// PD controller `m(ω² + 2ζω δ / (1 + τδ))`, `τ = 1/(ratio·ω)`, scaled to `mass`.
    pub fn pd(mass: f64, tuning: ControllerTuning, sample_time: f64) -> Result<Self> {
        if !(mass > 0.0 && tuning.bandwidth_hz > 0.0 && tuning.derivative_filter_ratio > 0.0) {
            return Err(Error::InvalidSystem(
                "controller mass, bandwidth and filter ratio must be positive".into(),
            ));
        }
        let omega = std::f64::consts::TAU * tuning.bandwidth_hz;
        let kp = mass * omega * omega;
        let kd = 2.0 * tuning.damping_ratio * mass * omega;
        let tau = 1.0 / (tuning.derivative_filter_ratio * omega);
        let ts = sample_time;
        // (kp(1 + τδ) + kd δ) / (1 + τδ) with δ = (1 − q⁻¹)/T_s
        let numerator = vec![
            kp * (1.0 + tau / ts) + kd / ts,
            -(kp * tau / ts + kd / ts),
        ];
        let denominator = vec![1.0 + tau / ts, -tau / ts];
        Ok(Self::new(DiscreteTransferFunction::new(
            numerator,
            denominator,
            ts,
        )?))
    }

    /// One default controller per plant axis.
    pub fn default_for(plant: &SpatialPlant, tuning: ControllerTuning) -> Result<Vec<Self>> {
        plant
            .nominal_masses()
            .into_iter()
            .map(|m| Self::pd(m, tuning, plant.sample_time))
            .collect()
    }
}

fn closed_loop_characteristic(
    plant: &DiscreteTransferFunction,
    ctrl: &FeedbackController,
) -> Result<Vec<f64>> {
    check_same_rate(plant, &ctrl.tf)?;
    let characteristic = poly_add(
        &poly_mul(&plant.denominator, &ctrl.tf.denominator),
        &poly_mul(&plant.numerator, &ctrl.tf.numerator),
    );
    if characteristic[0].abs() <= 1e-14 * characteristic.iter().fold(0.0_f64, |m, c| m.max(c.abs())) {
        return Err(Error::AlgebraicLoop);
    }
    let magnitudes: Vec<f64> = polynomial_roots(&characteristic)
        .iter()
        .map(|p| p.norm())
        .collect();
    if magnitudes.iter().any(|m| *m >= 1.0) {
        return Err(Error::Unstable {
            pole_magnitudes: magnitudes,
        });
    }
    Ok(characteristic)
}

fn is_open_loop(plant: &DiscreteTransferFunction, ctrl: &FeedbackController) -> bool {
    plant.is_zero() || ctrl.tf.is_zero()
}

/// Sensitivity `S = (1 + GC)⁻¹`.
pub fn sensitivity(
    plant: &DiscreteTransferFunction,
    ctrl: &FeedbackController,
) -> Result<DiscreteTransferFunction> {
    if is_open_loop(plant, ctrl) {
        check_same_rate(plant, &ctrl.tf)?;
        return DiscreteTransferFunction::gain(1.0, plant.sample_time);
    }
    let characteristic = closed_loop_characteristic(plant, ctrl)?;
    DiscreteTransferFunction::new(
        poly_mul(&plant.denominator, &ctrl.tf.denominator),
        characteristic,
        plant.sample_time,
    )
}

/// Process sensitivity `S·G`, formed as one rational system.
pub fn process_sensitivity(
    plant: &DiscreteTransferFunction,
    ctrl: &FeedbackController,
) -> Result<DiscreteTransferFunction> {
    if is_open_loop(plant, ctrl) {
        check_same_rate(plant, &ctrl.tf)?;
        return Ok(plant.clone());
    }
    let characteristic = closed_loop_characteristic(plant, ctrl)?;
    DiscreteTransferFunction::new(
        poly_mul(&plant.numerator, &ctrl.tf.denominator),
        characteristic,
        plant.sample_time,
    )
}

/// Closed-loop poles `z` (roots of `A_G A_C + B_G B_C`).
pub fn closed_loop_poles(
    plant: &DiscreteTransferFunction,
    ctrl: &FeedbackController,
) -> Vec<Complex64> {
    polynomial_roots(&poly_add(
        &poly_mul(&plant.denominator, &ctrl.tf.denominator),
        &poly_mul(&plant.numerator, &ctrl.tf.numerator),
    ))
}

/// Lower-triangular Toeplitz matrix of a causal system over one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftedOperator {
    matrix: DMatrix<f64>,
    impulse_response: Vec<f64>,
}

impl LiftedOperator {
    pub fn from_impulse_response(impulse_response: Vec<f64>) -> Result<Self> {
        let n = impulse_response.len();
        if n == 0 {
            return Err(Error::EmptyTrial);
        }
        let matrix = DMatrix::from_fn(n, n, |i, j| {
            if i >= j {
                impulse_response[i - j]
            } else {
                0.0
            }
        });
        Ok(Self {
            matrix,
            impulse_response,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn impulse_response(&self) -> &[f64] {
        &self.impulse_response
    }

    pub fn len(&self) -> usize {
        self.impulse_response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impulse_response.is_empty()
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "lifted operator of size {} applied to signal of length {}",
                self.len(),
                input.len()
            )));
        }
        Ok((&self.matrix * DVector::from_column_slice(input))
            .iter()
            .copied()
            .collect())
    }
}

pub fn lift(sys: &DiscreteTransferFunction, trial_length: usize) -> Result<LiftedOperator> {
    if trial_length == 0 {
        return Err(Error::EmptyTrial);
    }
    LiftedOperator::from_impulse_response(sys.impulse_response(trial_length))
}

/// Additive white Gaussian output noise, one standard deviation per axis
/// (a single entry applies to every axis).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std: Vec<f64>,
}

impl NoiseSpec {
    pub fn off() -> Self {
        Self { std: Vec::new() }
    }

    pub fn uniform(std: f64) -> Self {
        Self { std: vec![std] }
    }

    pub fn std_for(&self, axis: usize) -> f64 {
        match self.std.len() {
            0 => 0.0,
            1 => self.std[0],
            _ => self.std.get(axis).copied().unwrap_or(0.0),
        }
    }

    pub fn is_off(&self) -> bool {
        self.std.iter().all(|s| *s == 0.0)
    }

    /// Seeded noise realization, one length-`n` sequence per axis.
    pub fn sample(&self, axes: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..axes)
            .map(|axis| {
                let std = self.std_for(axis);
                if std == 0.0 {
                    return Ok(vec![0.0; n]);
                }
                let normal = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidInput(format!("noise std {std}: {e}")))?;
                Ok((0..n).map(|_| normal.sample(&mut rng)).collect())
            })
            .collect()
    }
}

/// Per-axis closed-loop signals of one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResponse {
    /// Measured output (includes noise).
    pub y: Vec<Vec<f64>>,
    /// Measured error `r − y`.
    pub e: Vec<Vec<f64>>,
    /// Plant input `C e + f`.
    pub u: Vec<Vec<f64>>,
}

impl ClosedLoopResponse {
    pub fn error_norm(&self) -> f64 {
        self.e.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn axis_error_norms(&self) -> Vec<f64> {
        self.e
            .iter()
            .map(|e| e.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }

    pub fn max_abs_error(&self) -> f64 {
        self.e.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// One SISO loop of the feedback/feedforward structure: `u = C e + f`,
/// `y = G u + n`, `e = r − y`.
pub fn simulate_loop(
    plant: &DiscreteTransferFunction,
    ctrl: &FeedbackController,
    reference: &[f64],
    feedforward: &[f64],
    noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    check_same_rate(plant, &ctrl.tf)?;
    let n = reference.len();
    if feedforward.len() != n || noise.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "reference ({n}), feedforward ({}) and noise ({}) lengths differ",
            feedforward.len(),
            noise.len()
        )));
    }
    let mut g = DifferenceEquation::new(plant);
    let mut c = DifferenceEquation::new(&ctrl.tf);
    let loop_gain = 1.0 + g.b0 * c.b0;
    if loop_gain.abs() < 1e-14 {
        return Err(Error::AlgebraicLoop);
    }
    let (mut y_out, mut e_out, mut u_out) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let g_free = g.free_response();
        let c_free = c.free_response();
        // Solve the loop equation for the noise-free output at sample k.
        let y = (g_free + g.b0 * (c_free + c.b0 * (reference[k] - noise[k]) + feedforward[k]))
            / loop_gain;
        let y_meas = y + noise[k];
        let e = reference[k] - y_meas;
        let u_fb = c_free + c.b0 * e;
        let u = u_fb + feedforward[k];
        c.push(e, u_fb);
        g.push(u, y);
        y_out.push(y_meas);
        e_out.push(e);
        u_out.push(u);
    }
    Ok((y_out, e_out, u_out))
}

/// Closed-loop trial of the plant frozen at `position`.
pub fn simulate_closed_loop(
    plant: &SpatialPlant,
    position: &[f64],
    controllers: &[FeedbackController],
    reference: &[Vec<f64>],
    feedforward: &[Vec<f64>],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<ClosedLoopResponse> {
    let dynamics = plant.evaluate(position)?;
    let axes = dynamics.len();
    if controllers.len() != axes || reference.len() != axes || feedforward.len() != axes {
        return Err(Error::DimensionMismatch(format!(
            "plant has {axes} axes but got {} controllers, {} references, {} feedforward signals",
            controllers.len(),
            reference.len(),
            feedforward.len()
        )));
    }
    let n = reference[0].len();
    if n == 0 {
        return Err(Error::EmptyTrial);
    }
    let noise = noise.sample(axes, n, seed)?;
    let mut response = ClosedLoopResponse {
        y: Vec::with_capacity(axes),
        e: Vec::with_capacity(axes),
        u: Vec::with_capacity(axes),
    };
    for axis in 0..axes {
        let (y, e, u) = simulate_loop(
            &dynamics[axis],
            &controllers[axis],
            &reference[axis],
            &feedforward[axis],
            &noise[axis],
        )?;
        response.y.push(y);
        response.e.push(e);
        response.u.push(u);
    }
    Ok(response)
}
