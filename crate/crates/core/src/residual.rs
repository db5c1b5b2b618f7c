//! Residual-based noise adaptation.
//!
//! Sliding-window maximum-likelihood estimates of `R̂` and `Q̂` in which every
//! outer product is weighted on both sides by the unweighted correntropy gain
//! `L`. With `L = I` this is the classical residual-based adaptive KF.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::DMatrix;

use crate::filter::{InnovationRecord, WindowSnapshot};
use crate::linalg;
use crate::{Error, Result, SensorId};

/// Floor applied to the diagonal of every estimate.
pub const DIAGONAL_FLOOR: f64 = 1e-12;

/// Per-step quantities retained by [`ResidualWindow`].
#[derive(Debug, Clone)]
pub struct ResidualEntry {
    /// `L r rᵀ L`
    pub weighted_residual: DMatrix<f64>,
    /// `L y yᵀ L`
    pub weighted_innovation: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    pub posterior_covariance: DMatrix<f64>,
    pub predicted_covariance: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub steps: usize,
}

impl ResidualEntry {
    pub fn from_record(record: &InnovationRecord, steps: usize) -> Self {
        let l = &record.weights.unweighted;
        let lr = record.residual.component_mul(l);
        let ly = record.innovation.component_mul(l);
        ResidualEntry {
            weighted_residual: &lr * lr.transpose(),
            weighted_innovation: &ly * ly.transpose(),
            jacobian: record.observation_jacobian.clone(),
            posterior_covariance: record.posterior_covariance.clone(),
            predicted_covariance: record.predicted_covariance.clone(),
            gain: record.gain.clone(),
            steps,
        }
    }
}

/// Ring buffer of the last `capacity` entries of one sensor.
#[derive(Debug, Clone)]
pub struct ResidualWindow {
    entries: VecDeque<ResidualEntry>,
    capacity: usize,
}

impl ResidualWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("window", "window length must be at least 1"));
        }
        Ok(ResidualWindow {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        })
    }

    pub fn push(&mut self, entry: ResidualEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn latest(&self) -> Option<&ResidualEntry> {
        self.entries.back()
    }

    fn average(&self, pick: impl Fn(&ResidualEntry) -> &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let first = self
            .entries
            .front()
            .ok_or(Error::AdaptationNotReady("residual window is empty"))?;
        let mut sum = DMatrix::zeros(pick(first).nrows(), pick(first).ncols());
        for e in &self.entries {
            sum += pick(e);
        }
        Ok(sum / self.entries.len() as f64)
    }
}

/// `Γ = (1/ϖ) Σ L r rᵀ L` over the entries currently held.
pub fn gamma_residual(window: &ResidualWindow) -> Result<DMatrix<f64>> {
    window.average(|e| &e.weighted_residual)
}

/// `Γ = (1/ϖ) Σ L y yᵀ L` over the entries currently held.
pub fn gamma_innovation(window: &ResidualWindow) -> Result<DMatrix<f64>> {
    window.average(|e| &e.weighted_innovation)
}

/// `R̂ = Γ + H P⁺ Hᵀ` using the latest entry, diagonal floored.
pub fn estimate_r(gamma: &DMatrix<f64>, window: &ResidualWindow) -> Result<DMatrix<f64>> {
    let latest = window
        .latest()
        .ok_or(Error::AdaptationNotReady("residual window is empty"))?;
    let h = &latest.jacobian;
    let mut r = gamma + h * &latest.posterior_covariance * h.transpose();
    linalg::floor_diagonal(&mut r, DIAGONAL_FLOOR);
    Ok(r)
}

/// `Q̂ = K Γ Kᵀ` using the latest gain, projected to PSD with a floored
/// diagonal. `diagonal_only` zeroes the off-diagonal terms.
pub fn estimate_q(
    window: &ResidualWindow,
    gamma: &DMatrix<f64>,
    diagonal_only: bool,
) -> Result<DMatrix<f64>> {
    let latest = window
        .latest()
        .ok_or(Error::AdaptationNotReady("residual window is empty"))?;
    let k = &latest.gain;
    let mut q = linalg::psd_project(&(k * gamma * k.transpose()));
    if diagonal_only {
        q = DMatrix::from_diagonal(&q.diagonal());
    }
    linalg::floor_diagonal(&mut q, DIAGONAL_FLOOR);
    Ok(q)
}

/// `‖Γ⁻¹ y − R̂⁻¹ r‖_∞` for one update, with `Γ = H P⁻ Hᵀ + R̂`. Zero (to
/// rounding) whenever the update used the optimal Kalman gain.
pub fn check_identity_a1(
    record: &InnovationRecord,
    noise: &DMatrix<f64>,
    innovation_covariance: &DMatrix<f64>,
) -> Result<f64> {
    let lhs = innovation_covariance
        .clone()
        .lu()
        .solve(&record.innovation)
        .ok_or(Error::Singular("innovation covariance"))?;
    let rhs = noise
        .clone()
        .lu()
        .solve(&record.residual)
        .ok_or(Error::Singular("measurement noise"))?;
    Ok((lhs - rhs).amax())
}

/// `H P⁻ Hᵀ + R̂` of a record.
pub fn innovation_covariance(record: &InnovationRecord) -> DMatrix<f64> {
    let h = &record.observation_jacobian;
    h * &record.predicted_covariance * h.transpose() + &record.noise
}

/// Which windowed average feeds `Q̂ = K Γ Kᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaForm {
    #[default]
    Innovation,
    Residual,
}

#[derive(Debug, Clone)]
pub struct ResidualSettings {
    pub window: usize,
    /// Blend factor of `R̂ ← (1 − β) R̂_prev + β R̂_new`; 1 disables smoothing.
    pub smoothing: f64,
    /// Sensor whose corrections drive `Q̂`.
    pub primary: Option<SensorId>,
    pub q_gamma: GammaForm,
    pub diagonal_q: bool,
    /// Keep only the diagonal of `R̂`, one adaptive parameter per
    /// measurement dimension.
    pub diagonal_r: bool,
}

impl Default for ResidualSettings {
    fn default() -> Self {
        ResidualSettings {
            window: 10,
            smoothing: 1.0,
            primary: None,
            q_gamma: GammaForm::Innovation,
            diagonal_q: false,
            diagonal_r: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualEstimate {
    pub measurement_noise: DMatrix<f64>,
    /// Present only for corrections of the primary sensor. Expressed per
    /// prediction step of the interval that led into the correction.
    pub process_noise: Option<DMatrix<f64>>,
}

/// One window per sensor plus the `Q̂` cadence rule.
#[derive(Debug, Clone)]
pub struct ResidualAdaptation {
    settings: ResidualSettings,
    windows: BTreeMap<SensorId, ResidualWindow>,
}

impl ResidualAdaptation {
    pub fn new(settings: ResidualSettings) -> Result<Self> {
        if settings.window == 0 {
            return Err(Error::config("window", "window length must be at least 1"));
        }
        if !(settings.smoothing > 0.0 && settings.smoothing <= 1.0) {
            return Err(Error::config(
                "beta",
                format!(
                    "smoothing factor must lie in (0, 1], got {}",
                    settings.smoothing
                ),
            ));
        }
        Ok(ResidualAdaptation {
            settings,
            windows: BTreeMap::new(),
        })
    }

    pub fn settings(&self) -> &ResidualSettings {
        &self.settings
    }

    pub fn window(&self, sensor: &SensorId) -> Option<&ResidualWindow> {
        self.windows.get(sensor)
    }

    /// Fold one correction in. `previous_noise` is the sensor's `R̂` before
    /// this step, used by the exponential smoothing.
    pub fn observe(
        &mut self,
        snapshot: &WindowSnapshot,
        previous_noise: &DMatrix<f64>,
    ) -> Result<ResidualEstimate> {
        let record = &snapshot.record;
        let window = match self.windows.entry(record.sensor.clone()) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(ResidualWindow::new(self.settings.window)?)
            }
        };
        window.push(ResidualEntry::from_record(record, snapshot.steps));

        let mut fresh = estimate_r(&gamma_residual(window)?, window)?;
        if self.settings.diagonal_r {
            fresh = DMatrix::from_diagonal(&fresh.diagonal());
        }
        let beta = self.settings.smoothing;
        let measurement_noise = if beta == 1.0 {
            fresh
        } else {
            previous_noise * (1.0 - beta) + fresh * beta
        };

        let is_primary = self
            .settings
            .primary
            .as_ref()
            .is_none_or(|p| p == &record.sensor);
        let process_noise = if is_primary && snapshot.steps > 0 {
            let gamma = match self.settings.q_gamma {
                GammaForm::Innovation => gamma_innovation(window)?,
                GammaForm::Residual => gamma_residual(window)?,
            };
            let q = estimate_q(window, &gamma, self.settings.diagonal_q)?;
            let mut per_step = q / snapshot.steps as f64;
            linalg::floor_diagonal(&mut per_step, DIAGONAL_FLOOR);
            Some(per_step)
        } else {
            None
        };
        Ok(ResidualEstimate {
            measurement_noise,
            process_noise,
        })
    }
}
