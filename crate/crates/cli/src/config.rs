//! Experiment configuration files. Every section rejects unknown keys.

use std::path::{Path, PathBuf};

use posff::framework::{ExperimentPlan, IlcPlan, ReferenceSpec};
use posff::gp::{Objective, OptimizerConfig, PriorMean};
use posff::ilcbf::{IlcWeights, ModelChoice, WeightScaling};
use posff::plant::{ControllerTuning, DomainBox, NoiseSpec, PlantKind, SpatialPlant};
use posff::trajectory::ProfileOrder;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub seed: u64,
    pub plant: PlantSection,
    #[serde(default)]
    pub controller: ControllerSection,
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub ilc: IlcSection,
    #[serde(default)]
    pub gp: GpSection,
    pub positions: PositionsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// `spatial_mass`, `mass_damper` or `periodic_flux`.
    pub kind: String,
    pub nominal_mass: Option<f64>,
    pub mass: Option<f64>,
    pub damping: Option<f64>,
    pub masses: Option<[f64; 2]>,
    pub dampings: Option<[f64; 2]>,
    pub pitch: Option<f64>,
    pub ripple: Option<f64>,
    pub mass_slope: Option<f64>,
    #[serde(default = "default_sample_time")]
    pub sample_time: f64,
    pub domain_min: Option<Vec<f64>>,
    pub domain_max: Option<Vec<f64>>,
    /// Output noise standard deviation, one value or one per axis.
    #[serde(default)]
    pub noise_std: Vec<f64>,
    /// Whether the evaluation runs see the same noise as learning.
    #[serde(default = "yes")]
    pub evaluation_noise: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub bandwidth_hz: f64,
    pub damping_ratio: f64,
    pub derivative_filter_ratio: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let t = ControllerTuning::default();
        Self {
            bandwidth_hz: t.bandwidth_hz,
            damping_ratio: t.damping_ratio,
            derivative_filter_ratio: t.derivative_filter_ratio,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub strokes: Vec<f64>,
    pub duration: f64,
    /// 2 for acceleration-limited, 3 for jerk-limited profiles.
    #[serde(default = "default_order")]
    pub order: u32,
    #[serde(default = "default_settle")]
    pub settle_time: f64,
    /// Basis column names per axis.
    pub basis: Vec<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlcSection {
    pub trials: usize,
    pub trailing_fraction: f64,
    pub error_weight: f64,
    pub effort_weight: f64,
    pub effort_change_weight: f64,
    pub weight_scaling: WeightScaling,
    /// Learn with the model at this position instead of the exact local one.
    pub model_position: Option<Vec<f64>>,
}

impl Default for IlcSection {
    fn default() -> Self {
        let w = IlcWeights::default();
        Self {
            trials: 20,
            trailing_fraction: 0.4,
            error_weight: w.error,
            effort_weight: w.effort,
            effort_change_weight: w.effort_change,
            weight_scaling: w.scaling,
            model_position: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSection {
    pub objective: Objective,
    pub prior_mean: PriorMean,
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub noise_floor: f64,
}

impl Default for GpSection {
    fn default() -> Self {
        let c = OptimizerConfig::default();
        Self {
            objective: c.objective,
            prior_mean: c.prior_mean,
            restarts: c.restarts,
            max_iterations: c.max_iterations,
            gradient_tolerance: c.gradient_tolerance,
            noise_floor: c.noise_floor,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionsSection {
    pub training: Vec<Vec<f64>>,
    #[serde(default)]
    pub test: Vec<Vec<f64>>,
    pub center: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Grid points per position dimension for the GP surface CSV.
    pub grid_points: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            grid_points: 101,
        }
    }
}

fn default_sample_time() -> f64 {
    1e-3
}

fn default_order() -> u32 {
    3
}

fn default_settle() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

/// Parsed plan plus the output settings.
#[derive(Debug)]
pub struct RunConfig {
    pub plan: ExperimentPlan,
    pub out_dir: PathBuf,
    pub grid_points: usize,
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    file.into_run_config()
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl PlantSection {
    fn build(&self) -> Result<SpatialPlant, CliError> {
        let allowed: &[&str] = match self.kind.as_str() {
            "spatial_mass" => &["nominal_mass"],
            "mass_damper" => &["mass", "damping"],
            "periodic_flux" => &["masses", "dampings", "pitch", "ripple", "mass_slope"],
            other => {
                return Err(config_err(format!(
                    "plant.kind `{other}` is not one of spatial_mass, mass_damper, periodic_flux"
                )))
            }
        };
        let present = [
            ("nominal_mass", self.nominal_mass.is_some()),
            ("mass", self.mass.is_some()),
            ("damping", self.damping.is_some()),
            ("masses", self.masses.is_some()),
            ("dampings", self.dampings.is_some()),
            ("pitch", self.pitch.is_some()),
            ("ripple", self.ripple.is_some()),
            ("mass_slope", self.mass_slope.is_some()),
        ];
        for (key, set) in present {
            if set && !allowed.contains(&key) {
                return Err(config_err(format!(
                    "plant.{key} does not apply to kind `{}`",
                    self.kind
                )));
            }
        }
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| config_err(format!("plant.{key} is required for kind `{}`", self.kind)))
        };
        let kind = match self.kind.as_str() {
            "spatial_mass" => PlantKind::SpatialMass {
                nominal_mass: need(self.nominal_mass, "nominal_mass")?,
            },
            "mass_damper" => PlantKind::MassDamper {
                mass: need(self.mass, "mass")?,
                damping: self.damping.unwrap_or(0.0),
            },
            _ => PlantKind::PeriodicFlux {
                masses: self
                    .masses
                    .ok_or_else(|| config_err("plant.masses is required for kind `periodic_flux`"))?,
                dampings: self.dampings.unwrap_or([0.0, 0.0]),
                pitch: need(self.pitch, "pitch")?,
                ripple: need(self.ripple, "ripple")?,
                mass_slope: self.mass_slope.unwrap_or(0.0),
            },
        };
        let dim = if self.kind == "periodic_flux" { 2 } else { 1 };
        let domain = match (&self.domain_min, &self.domain_max) {
            (None, None) => DomainBox::unit(dim),
            (Some(lo), Some(hi)) => DomainBox::new(lo.clone(), hi.clone())?,
            _ => return Err(config_err("plant.domain_min and plant.domain_max go together")),
        };
        Ok(SpatialPlant::new(kind, self.sample_time, domain)?)
    }
}

impl ConfigFile {
    pub fn into_run_config(self) -> Result<RunConfig, CliError> {
        let plant = self.plant.build()?;
        let noise = if self.plant.noise_std.is_empty() || self.plant.noise_std.iter().all(|s| *s == 0.0) {
            NoiseSpec::off()
        } else {
            if self.plant.noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(config_err("plant.noise_std must be non-negative"));
            }
            NoiseSpec { std: self.plant.noise_std.clone() }
        };
        let order = ProfileOrder::from_order(self.trajectory.order)
            .map_err(|e| config_err(format!("trajectory.order: {e}")))?;
        let ilc = IlcPlan {
            weights: IlcWeights {
                error: self.ilc.error_weight,
                effort: self.ilc.effort_weight,
                effort_change: self.ilc.effort_change_weight,
                scaling: self.ilc.weight_scaling,
            },
            trials: self.ilc.trials,
            trailing_fraction: self.ilc.trailing_fraction,
            model: match self.ilc.model_position {
                Some(p) => ModelChoice::AtPosition(p),
                None => ModelChoice::Exact,
            },
            noise,
        };
        ilc.weights
            .validate()
            .map_err(|e| config_err(format!("ilc: {e}")))?;
        if ilc.trials == 0 {
            return Err(config_err("ilc.trials must be at least 1"));
        }
        if !(ilc.trailing_fraction > 0.0 && ilc.trailing_fraction <= 1.0) {
            return Err(config_err("ilc.trailing_fraction must lie in (0, 1]"));
        }
        let gp = OptimizerConfig {
            restarts: self.gp.restarts,
            max_iterations: self.gp.max_iterations,
            gradient_tolerance: self.gp.gradient_tolerance,
            seed: 0,
            objective: self.gp.objective,
            prior_mean: self.gp.prior_mean,
            noise_floor: self.gp.noise_floor,
        };
        if gp.restarts == 0 {
            return Err(config_err("gp.restarts must be at least 1"));
        }
        let plan = ExperimentPlan {
            plant,
            controller: ControllerTuning {
                bandwidth_hz: self.controller.bandwidth_hz,
                damping_ratio: self.controller.damping_ratio,
                derivative_filter_ratio: self.controller.derivative_filter_ratio,
            },
            reference: ReferenceSpec {
                strokes: self.trajectory.strokes,
                duration: self.trajectory.duration,
                order,
                settle_time: self.trajectory.settle_time,
            },
            basis: self.trajectory.basis,
            training: self.positions.training,
            test: self.positions.test,
            center: self.positions.center,
            ilc,
            gp,
            evaluation_noise: self.plant.evaluation_noise,
            master_seed: self.seed,
        };
        if plan.reference.strokes.len() != plan.plant.axes() || plan.basis.len() != plan.plant.axes() {
            return Err(config_err(format!(
                "trajectory.strokes and trajectory.basis need one entry per axis ({})",
                plan.plant.axes()
            )));
        }
        plan.validate()?;
        if self.output.grid_points < 2 {
            return Err(config_err("output.grid_points must be at least 2"));
        }
        Ok(RunConfig {
            plan,
            out_dir: self.output.dir,
            grid_points: self.output.grid_points,
        })
    }
}
