//! Position-dependent feedforward for motion systems.
//!
//! Feedforward parameters are learned at a handful of training positions by
//! norm-optimal iterative learning control with basis functions, then modeled
//! as a continuous function of position with Gaussian-process regression.
//!
//! Module map:
//! * [`plant`]: discrete-time plants, feedback loop, lifted operators
//! * [`trajectory`]: point-to-point references and basis signals
//! * [`ilcbf`]: parameter update law and trial loop at a fixed position
//! * [`gp`]: squared-exponential GP regression and hyperparameter fitting
//! * [`framework`]: training-data collection, prediction, method comparison
//! * [`export`]: CSV and JSON artifacts

pub mod error;
pub mod export;
pub mod framework;
pub mod gp;
pub mod ilcbf;
pub mod plant;
pub mod seed;
pub mod trajectory;

pub use error::{Error, Result};
