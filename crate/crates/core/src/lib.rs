//! Adaptive maximum correntropy criterion Kalman filtering.
//!
//! The crate is organised bottom-up:
//!
//! - [`filter`]: prediction and correntropy-weighted correction on dense
//!   Gaussian beliefs, plus the plain KF/EKF correction used as a baseline.
//! - [`bandwidth`]: per-dimension online kernel bandwidth selection.
//! - [`vb`]: variational Bayesian noise adaptation (sliding-window RTS
//!   smoother feeding inverse-Wishart hyperparameters).
//! - [`residual`]: residual/innovation based maximum-likelihood noise
//!   adaptation.
//! - [`eskf`]: error-state filtering of an IMU-propagated pose on SE(3),
//!   corrected by any number of odometry sources.
//! - [`sim`], [`dataset`], [`config`], [`metrics`], [`experiment`]:
//!   synthetic scenarios, dataset I/O and the experiment runner behind the
//!   `amcckf` command-line tool.

pub mod bandwidth;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eskf;
pub mod experiment;
pub mod filter;
pub mod linalg;
pub mod metrics;
pub mod residual;
pub mod sim;
pub mod vb;

pub use error::{Error, Result};

use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque identifier of a measurement source.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SensorId(pub String);

impl SensorId {
    pub fn new(id: impl Into<String>) -> Self {
        SensorId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SensorId {
    fn from(s: &str) -> Self {
        SensorId(s.to_owned())
    }
}
