//! Point-to-point references and the basis-signal matrix `Ψ(q⁻¹)r(k)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothness order of the point-to-point profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileOrder {
    /// Piecewise-constant acceleration (bang-bang).
    Acceleration,
    /// Piecewise-constant jerk, four equal phases.
    Jerk,
}

impl ProfileOrder {
    pub fn from_order(order: u32) -> Result<Self> {
        match order {
            2 => Ok(Self::Acceleration),
            3 => Ok(Self::Jerk),
            other => Err(Error::InvalidInput(format!(
                "profile order must be 2 or 3, got {other}"
            ))),
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Self::Acceleration => 2,
            Self::Jerk => 3,
        }
    }

    fn min_samples(self) -> usize {
        match self {
            Self::Acceleration => 4,
            Self::Jerk => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionMeta {
    pub start: f64,
    pub end: f64,
    pub duration: f64,
}

/// Rest-to-rest reference, one sampled signal per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    axes: Vec<Vec<f64>>,
    sample_time: f64,
    motions: Vec<MotionMeta>,
}

impl Reference {
    pub fn new(axes: Vec<Vec<f64>>, sample_time: f64, motions: Vec<MotionMeta>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidInput("reference needs at least one axis".into()));
        }
        let n = axes[0].len();
        if n < 4 {
            return Err(Error::InvalidInput(format!(
                "reference needs at least 4 samples, got {n}"
            )));
        }
        if axes.iter().any(|a| a.len() != n) {
            return Err(Error::DimensionMismatch("reference axes differ in length".into()));
        }
        if !(sample_time > 0.0) {
            return Err(Error::InvalidInput("sample time must be positive".into()));
        }
        for axis in &axes {
            if axis[0] != axis[1] || axis[n - 1] != axis[n - 2] {
                return Err(Error::InvalidInput(
                    "reference must be rest-to-rest (first two and last two samples equal)".into(),
                ));
            }
        }
        Ok(Self {
            axes,
            sample_time,
            motions,
        })
    }

    /// Combine single-axis references of equal length into one multi-axis reference.
    pub fn stack(parts: Vec<Reference>) -> Result<Self> {
        let sample_time = parts
            .first()
            .map(|r| r.sample_time)
            .ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
        let mut axes = Vec::new();
        let mut motions = Vec::new();
        for part in parts {
            axes.extend(part.axes);
            motions.extend(part.motions);
        }
        Self::new(axes, sample_time, motions)
    }

    /// Hold the final value for `samples` extra samples.
    pub fn with_settle(mut self, samples: usize) -> Self {
        for axis in &mut self.axes {
            let last = *axis.last().expect("nonempty reference");
            axis.extend(std::iter::repeat_n(last, samples));
        }
        self
    }

    pub fn len(&self) -> usize {
        self.axes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axes(&self) -> usize {
        self.axes.len()
    }

    pub fn axis(&self, index: usize) -> &[f64] {
        &self.axes[index]
    }

    pub fn signals(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn motions(&self) -> &[MotionMeta] {
        &self.motions
    }
}

/// Displacement of a symmetric profile covering `distance` in `duration`.
fn profile_displacement(order: ProfileOrder, distance: f64, duration: f64, t: f64) -> f64 {
    let half = |t: f64| match order {
        ProfileOrder::Acceleration => 2.0 * distance * (t / duration).powi(2),
        ProfileOrder::Jerk => {
            let tau = duration / 4.0;
            let jerk = 32.0 * distance / duration.powi(3);
            if t <= tau {
                jerk * t.powi(3) / 6.0
            } else {
                let s = t - tau;
                jerk * tau.powi(3) / 6.0 + 0.5 * jerk * tau * tau * s + 0.5 * jerk * tau * s * s
                    - jerk * s.powi(3) / 6.0
            }
        }
    };
    if t <= 0.5 * duration {
        half(t)
    } else {
        distance - half(duration - t)
    }
}

/// Symmetric rest-to-rest point-to-point reference from `start` to `end`.
///
/// The motion spans `round(duration / T_s)` sampling intervals and is padded
/// with one hold sample at each end, so the first two and last two samples
/// coincide.
pub fn polynomial_reference(
    start: f64,
    end: f64,
    duration: f64,
    sample_time: f64,
    order: ProfileOrder,
) -> Result<Reference> {
    if !(sample_time > 0.0) || !duration.is_finite() {
        return Err(Error::InvalidInput("sample time and duration must be positive".into()));
    }
    let intervals = (duration / sample_time).round();
    if !(intervals >= order.min_samples() as f64) || duration < 4.0 * sample_time {
        return Err(Error::Infeasible(format!(
            "duration {duration} s is too short for an order-{} profile at T_s = {sample_time} s",
            order.order()
        )));
    }
    let intervals = intervals as usize;
    let motion_time = intervals as f64 * sample_time;
    let distance = end - start;
    let mut samples = Vec::with_capacity(intervals + 3);
    samples.push(start);
    samples.extend((0..=intervals).map(|k| {
        if k == intervals {
            end
        } else {
            start + profile_displacement(order, distance, motion_time, k as f64 * sample_time)
        }
    }));
    samples.push(end);
    Reference::new(
        vec![samples],
        sample_time,
        vec![MotionMeta {
            start,
            end,
            duration: motion_time,
        }],
    )
}

/// Backward difference `(1 − q⁻¹)` with `x(−1) = x(0)`.
fn backward_difference(x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(k, v)| if k == 0 { 0.0 } else { v - x[k - 1] })
        .collect()
}

pub fn velocity(r: &[f64], sample_time: f64) -> Vec<f64> {
    backward_difference(r)
        .into_iter()
        .map(|d| d / sample_time)
        .collect()
}

pub fn acceleration(r: &[f64], sample_time: f64) -> Vec<f64> {
    backward_difference(&backward_difference(r))
        .into_iter()
        .map(|d| d / (sample_time * sample_time))
        .collect()
}

/// Sign of the backward-difference velocity, zero at rest. Coulomb-friction
/// style non-linear basis.
pub fn sign_velocity(r: &[f64], sample_time: f64) -> Vec<f64> {
    let v = velocity(r, sample_time);
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    v.iter()
        .map(|x| {
            if x.abs() <= 1e-12 * scale {
                0.0
            } else {
                x.signum()
            }
        })
        .collect()
}

pub type SignalMap = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;

/// One kind of basis column.
#[derive(Clone)]
pub enum BasisKind {
    Velocity,
    Acceleration,
    SignVelocity,
    /// Caller-supplied pure map `(r, T_s) ↦ column`.
    Custom { name: String, map: SignalMap },
}

impl BasisKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "velocity" => Ok(Self::Velocity),
            "acceleration" => Ok(Self::Acceleration),
            "sign_velocity" => Ok(Self::SignVelocity),
            other => Err(Error::UnknownBasis(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Velocity => "velocity",
            Self::Acceleration => "acceleration",
            Self::SignVelocity => "sign_velocity",
            Self::Custom { name, .. } => name,
        }
    }

    fn column(&self, r: &[f64], sample_time: f64) -> Vec<f64> {
        match self {
            Self::Velocity => velocity(r, sample_time),
            Self::Acceleration => acceleration(r, sample_time),
            Self::SignVelocity => sign_velocity(r, sample_time),
            Self::Custom { map, .. } => map(r, sample_time),
        }
    }
}

impl fmt::Debug for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialEq for BasisKind {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

/// A basis column applied to one axis of the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisDescriptor {
    pub axis: usize,
    pub kind: BasisKind,
}

impl BasisDescriptor {
    pub fn new(axis: usize, kind: BasisKind) -> Self {
        Self { axis, kind }
    }

    /// Descriptors from per-axis lists of basis names.
    pub fn from_names<S: AsRef<str>>(per_axis: &[Vec<S>]) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for (axis, names) in per_axis.iter().enumerate() {
            for name in names {
                out.push(Self::new(axis, BasisKind::from_name(name.as_ref())?));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisColumn {
    pub axis: usize,
    pub kind: String,
    pub values: Vec<f64>,
}

/// Block-diagonal basis: every parameter drives exactly one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisMatrix {
    columns: Vec<BasisColumn>,
    axes: usize,
    len: usize,
}

impl BasisMatrix {
    pub fn n_params(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> usize {
        self.axes
    }

    pub fn columns(&self) -> &[BasisColumn] {
        &self.columns
    }

    /// Parameter indices acting on `axis`, in order.
    pub fn axis_parameters(&self, axis: usize) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.axis == axis)
            .map(|(i, _)| i)
            .collect()
    }

    /// `N × n_axis` block of the columns acting on `axis`.
    pub fn axis_matrix(&self, axis: usize) -> DMatrix<f64> {
        let idx = self.axis_parameters(axis);
        DMatrix::from_fn(self.len, idx.len(), |k, c| self.columns[idx[c]].values[k])
    }

    pub fn labels(&self) -> Vec<String> {
        self.columns
            .iter()
            .map(|c| format!("{}_{}", c.kind, c.axis))
            .collect()
    }

    /// `f = Ψ r θ`, one signal per axis.
    pub fn feedforward(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for a basis with {} columns",
                theta.len(),
                self.n_params()
            )));
        }
        let mut out = vec![vec![0.0; self.len]; self.axes];
        for (column, weight) in self.columns.iter().zip(theta) {
            for (f, v) in out[column.axis].iter_mut().zip(&column.values) {
                *f += weight * v;
            }
        }
        Ok(out)
    }

    /// Column of `Ψ` as a vector.
    pub fn column_vector(&self, index: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.columns[index].values)
    }
}

pub fn build_basis(reference: &Reference, kinds: &[BasisDescriptor]) -> Result<BasisMatrix> {
    if kinds.is_empty() {
        return Err(Error::InvalidInput("basis descriptor list is empty".into()));
    }
    let columns = kinds
        .iter()
        .map(|d| {
            if d.axis >= reference.axes() {
                return Err(Error::DimensionMismatch(format!(
                    "basis column on axis {} but reference has {} axes",
                    d.axis,
                    reference.axes()
                )));
            }
            let values = d.kind.column(reference.axis(d.axis), reference.sample_time());
            if values.len() != reference.len() {
                return Err(Error::DimensionMismatch(format!(
                    "basis `{}` returned {} samples, expected {}",
                    d.kind.name(),
                    values.len(),
                    reference.len()
                )));
            }
            Ok(BasisColumn {
                axis: d.axis,
                kind: d.kind.name().to_string(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BasisMatrix {
        columns,
        axes: reference.axes(),
        len: reference.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_reference_for_equal_endpoints() {
        let r = polynomial_reference(0.2, 0.2, 0.05, 1e-3, ProfileOrder::Jerk).unwrap();
        assert!(r.axis(0).iter().all(|v| *v == 0.2));
        let basis = build_basis(
            &r,
            &[
                BasisDescriptor::new(0, BasisKind::Velocity),
                BasisDescriptor::new(0, BasisKind::Acceleration),
            ],
        )
        .unwrap();
        for c in basis.columns() {
            assert!(c.values.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn midpoint_by_antisymmetry() {
        for order in [ProfileOrder::Acceleration, ProfileOrder::Jerk] {
            let r = polynomial_reference(0.0, 1.0, 0.1, 1e-3, order).unwrap();
            let mid = (r.len() - 1) / 2;
            assert_relative_eq!(r.axis(0)[mid], 0.5, epsilon = 1e-12);
            assert_eq!(r.axis(0)[0], 0.0);
            assert_eq!(*r.axis(0).last().unwrap(), 1.0);
        }
    }

    #[test]
    fn too_short_duration_is_infeasible() {
        let err = polynomial_reference(0.0, 1.0, 5e-3, 1e-3, ProfileOrder::Jerk);
        assert!(matches!(err, Err(Error::Infeasible(_))));
        let err = polynomial_reference(0.0, 1.0, 3e-3, 1e-3, ProfileOrder::Acceleration);
        assert!(matches!(err, Err(Error::Infeasible(_))));
        assert!(polynomial_reference(0.0, 1.0, 4e-3, 1e-3, ProfileOrder::Acceleration).is_ok());
    }

    #[test]
    fn summed_acceleration_recovers_displacement() {
        let ts = 1e-4;
        let r = polynomial_reference(0.0, 1.0, 0.1, ts, ProfileOrder::Jerk).unwrap();
        let acc = acceleration(r.axis(0), ts);
        let (mut v, mut p) = (0.0, 0.0);
        for a in acc {
            v += a * ts;
            p += v * ts;
        }
        assert!((p - 1.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn ramp_velocity_is_one() {
        let ts = 1e-3;
        let ramp: Vec<f64> = (0..20).map(|k| k as f64 * ts).collect();
        let v = velocity(&ramp, ts);
        assert_eq!(v[0], 0.0);
        for x in &v[1..] {
            assert_relative_eq!(*x, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn quadratic_second_difference_is_constant() {
        let ts = 1e-3;
        let quad: Vec<f64> = (0..30).map(|k| 0.5 * (k as f64 * ts).powi(2)).collect();
        let a = acceleration(&quad, ts);
        for x in &a[2..] {
            assert_relative_eq!(*x, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn unknown_basis_name() {
        assert!(matches!(
            BasisKind::from_name("snap"),
            Err(Error::UnknownBasis(name)) if name == "snap"
        ));
    }

    #[test]
    fn rest_to_rest_columns_vanish_at_ends() {
        let r = polynomial_reference(0.0, 0.01, 0.1, 1e-3, ProfileOrder::Jerk)
            .unwrap()
            .with_settle(20);
        let descriptors = BasisDescriptor::from_names(&[vec![
            "velocity",
            "acceleration",
            "sign_velocity",
        ]])
        .unwrap();
        let basis = build_basis(&r, &descriptors).unwrap();
        for c in basis.columns() {
            assert_eq!(c.values[0], 0.0);
            assert!(c.values.last().unwrap().abs() < 1e-9, "{}", c.kind);
        }
    }

    #[test]
    fn acceleration_feedforward_matches_definition() {
        let ts = 1e-3;
        let r = polynomial_reference(0.0, 0.01, 0.08, ts, ProfileOrder::Jerk).unwrap();
        let basis = build_basis(
            &r,
            &[
                BasisDescriptor::new(0, BasisKind::Acceleration),
                BasisDescriptor::new(0, BasisKind::Velocity),
            ],
        )
        .unwrap();
        let f = basis.feedforward(&[1.7, 0.0]).unwrap();
        let acc = acceleration(r.axis(0), ts);
        for (a, b) in f[0].iter().zip(&acc) {
            assert_eq!(*a, 1.7 * b);
        }
    }

    #[test]
    fn custom_map_is_used() {
        let r = polynomial_reference(0.0, 1.0, 0.02, 1e-3, ProfileOrder::Jerk).unwrap();
        let square: SignalMap = Arc::new(|r: &[f64], _| r.iter().map(|x| x * x).collect());
        let basis = build_basis(
            &r,
            &[BasisDescriptor::new(
                0,
                BasisKind::Custom {
                    name: "square".into(),
                    map: square,
                },
            )],
        )
        .unwrap();
        assert_eq!(basis.labels(), vec!["square_0".to_string()]);
        assert_eq!(*basis.columns()[0].values.last().unwrap(), 1.0);
    }

    #[test]
    fn stacked_axes_are_block_diagonal() {
        let a = polynomial_reference(0.0, 1.0, 0.02, 1e-3, ProfileOrder::Jerk).unwrap();
        let b = polynomial_reference(0.0, -0.5, 0.02, 1e-3, ProfileOrder::Jerk).unwrap();
        let r = Reference::stack(vec![a, b]).unwrap();
        let basis = build_basis(
            &r,
            &BasisDescriptor::from_names(&[vec!["acceleration"], vec!["velocity", "acceleration"]])
                .unwrap(),
        )
        .unwrap();
        assert_eq!(basis.axis_parameters(1), vec![1, 2]);
        let f = basis.feedforward(&[1.0, 0.0, 0.0]).unwrap();
        assert!(f[1].iter().all(|v| *v == 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn feedforward_is_linear(
                t1 in proptest::collection::vec(-10.0f64..10.0, 2),
                t2 in proptest::collection::vec(-10.0f64..10.0, 2),
            ) {
                let r = polynomial_reference(0.0, 0.01, 0.05, 1e-3, ProfileOrder::Jerk).unwrap();
                let basis = build_basis(&r, &BasisDescriptor::from_names(&[vec!["velocity", "acceleration"]]).unwrap()).unwrap();
                let sum: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
                let f = basis.feedforward(&sum).unwrap();
                let f1 = basis.feedforward(&t1).unwrap();
                let f2 = basis.feedforward(&t2).unwrap();
                for k in 0..r.len() {
                    let expect = f1[0][k] + f2[0][k];
                    prop_assert!((f[0][k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                }
            }
        }
    }
}
