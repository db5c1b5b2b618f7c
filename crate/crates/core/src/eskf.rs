//! Error-state Kalman filter for an IMU-driven pose on SE(3).
//!
//! The nominal state `(p, v, q)` is propagated with forward Euler from
//! bias-compensated IMU samples. The 9-dimensional error state
//! `(δp, δv, δθ)` carries the covariance, is corrected by odometry sources
//! through [`filter::correct`](crate::filter::correct) and is injected back
//! into the nominal state and reset after every correction.
//!
//! The orientation error is expressed in the world frame,
//! `q_true = q{δθ} ⊗ q̂`, which is the convention under which the attitude
//! block of the error transition is the identity and the velocity error picks
//! up `−[R̂ a]ₓ δθ Δt`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::bandwidth::{BandwidthBounds, BandwidthMode, BandwidthState};
use crate::filter::{
    correct, correntropy_weights, CorrentropyWeights, GaussianBelief, InnovationRecord,
    WindowSnapshot,
};
use crate::linalg::{self, skew, symmetrize};
use crate::residual::{GammaForm, ResidualAdaptation, ResidualSettings};
use crate::vb::VbAdaptation;
use crate::{Error, Result, SensorId};

/// Error-state dimension.
pub const ERROR_DIM: usize = 9;

/// Angle below which the quaternion log map switches to its series form.
const SMALL_ANGLE: f64 = 1e-12;

pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NominalState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub time: f64,
}

impl NominalState {
    pub fn at_rest(time: f64) -> Self {
        NominalState {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
            time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    /// Bias-compensated specific force in the body frame.
    pub specific_force: Vector3<f64>,
    /// Bias-compensated angular rate in the body frame.
    pub angular_rate: Vector3<f64>,
}

impl ImuSample {
    fn is_finite(&self) -> bool {
        self.time.is_finite()
            && self.specific_force.iter().all(|x| x.is_finite())
            && self.angular_rate.iter().all(|x| x.is_finite())
    }
}

/// Full 9-DoF odometry measurement: position, orientation, velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OdometrySample {
    pub time: f64,
    pub sensor: SensorId,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SensorEvent {
    Imu(ImuSample),
    Odometry(OdometrySample),
}

impl SensorEvent {
    pub fn time(&self) -> f64 {
        match self {
            SensorEvent::Imu(s) => s.time,
            SensorEvent::Odometry(s) => s.time,
        }
    }
}

/// Rotation vector to unit quaternion.
pub fn quat_exp(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Unit quaternion to rotation vector on the shortest branch. The flag is set
/// when the rotation angle is within 1e-9 of π, where the branch is a choice.
pub fn quat_log(q: &UnitQuaternion<f64>) -> (Vector3<f64>, bool) {
    let q = q.quaternion();
    let (w, xyz) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = xyz.norm();
    let angle = 2.0 * n.atan2(w);
    let antipodal = std::f64::consts::PI - angle < 1e-9;
    if n < SMALL_ANGLE {
        return (xyz * (2.0 / w), antipodal);
    }
    (xyz * (angle / n), antipodal)
}

/// World-frame attitude difference `log(a ⊗ b⁻¹)`.
pub fn attitude_error(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> (Vector3<f64>, bool) {
    quat_log(&(a * b.inverse()))
}

/// One forward-Euler step of the nominal kinematics.
pub fn propagate_nominal(
    x: &NominalState,
    imu: &ImuSample,
    gravity: &Vector3<f64>,
    dt: f64,
) -> Result<NominalState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidTimeStep(dt));
    }
    if !imu.is_finite() {
        return Err(Error::NonFiniteImu { time: imu.time });
    }
    let accel = x.orientation * imu.specific_force + gravity;
    let q = x.orientation * quat_exp(&(imu.angular_rate * dt));
    Ok(NominalState {
        position: x.position + x.velocity * dt,
        velocity: x.velocity + accel * dt,
        orientation: UnitQuaternion::new_normalize(q.into_inner()),
        time: x.time + dt,
    })
}

/// Error-state transition over one IMU step.
pub fn error_transition(x: &NominalState, imu: &ImuSample, dt: f64) -> DMatrix<f64> {
    let mut f = DMatrix::identity(ERROR_DIM, ERROR_DIM);
    let coupling: Matrix3<f64> = -skew(&(x.orientation * imu.specific_force)) * dt;
    f.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(Matrix3::identity() * dt));
    f.fixed_view_mut::<3, 3>(3, 6).copy_from(&coupling);
    f
}

/// Innovation of an odometry sample against the nominal state.
#[derive(Debug, Clone)]
pub struct ObservationResidual {
    /// `(z.p − p, log(z.q ⊗ q⁻¹), z.v − v)`
    pub innovation: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// The attitude difference sits at π and the log branch was chosen.
    pub antipodal: bool,
}

pub fn observation_residual(x: &NominalState, z: &OdometrySample) -> ObservationResidual {
    let (dtheta, antipodal) = attitude_error(&z.orientation, &x.orientation);
    let dp = z.position - x.position;
    let dv = z.velocity - x.velocity;
    let innovation = DVector::from_iterator(
        ERROR_DIM,
        dp.iter().chain(dtheta.iter()).chain(dv.iter()).copied(),
    );
    ObservationResidual {
        innovation,
        jacobian: observation_jacobian(),
        antipodal,
    }
}

/// Maps the error state `(δp, δv, δθ)` to the measurement order `(p, θ, v)`.
pub fn observation_jacobian() -> DMatrix<f64> {
    let mut h = DMatrix::zeros(ERROR_DIM, ERROR_DIM);
    h.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    h.fixed_view_mut::<3, 3>(3, 6).fill_with_identity();
    h.fixed_view_mut::<3, 3>(6, 3).fill_with_identity();
    h
}

/// `x ⊕ δx`: additive on position and velocity, world-frame rotation on the
/// attitude.
pub fn inject_and_reset(x: &NominalState, dx: &DVector<f64>) -> NominalState {
    debug_assert_eq!(dx.len(), ERROR_DIM);
    let dp = Vector3::new(dx[0], dx[1], dx[2]);
    let dv = Vector3::new(dx[3], dx[4], dx[5]);
    let dtheta = Vector3::new(dx[6], dx[7], dx[8]);
    let q = quat_exp(&dtheta) * x.orientation;
    NominalState {
        position: x.position + dp,
        velocity: x.velocity + dv,
        orientation: UnitQuaternion::new_normalize(q.into_inner()),
        time: x.time,
    }
}

/// Error of `estimate` relative to `truth` in filter coordinates.
pub fn state_error(truth: &NominalState, estimate: &NominalState) -> DVector<f64> {
    let dp = truth.position - estimate.position;
    let dv = truth.velocity - estimate.velocity;
    let (dtheta, _) = attitude_error(&truth.orientation, &estimate.orientation);
    DVector::from_iterator(
        ERROR_DIM,
        dp.iter().chain(dv.iter()).chain(dtheta.iter()).copied(),
    )
}

/// Quaternion with non-negative scalar part, rebuilt from its vector part.
pub fn canonical_quaternion(q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let v = if q.w < 0.0 { -q.imag() } else { q.imag() };
    let w = (1.0 - v.norm_squared()).max(0.0).sqrt();
    UnitQuaternion::new_unchecked(Quaternion::new(w, v.x, v.y, v.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterVariant {
    Ekf,
    Akf,
    Mcckf,
    RAmcckf,
    VbAmcckf,
}

impl FilterVariant {
    pub const ALL: [FilterVariant; 5] = [
        FilterVariant::Ekf,
        FilterVariant::Akf,
        FilterVariant::Mcckf,
        FilterVariant::RAmcckf,
        FilterVariant::VbAmcckf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FilterVariant::Ekf => "ekf",
            FilterVariant::Akf => "akf",
            FilterVariant::Mcckf => "mcckf",
            FilterVariant::RAmcckf => "r-amcckf",
            FilterVariant::VbAmcckf => "vb-amcckf",
        }
    }

    pub fn uses_kernel(self) -> bool {
        matches!(
            self,
            FilterVariant::Mcckf | FilterVariant::RAmcckf | FilterVariant::VbAmcckf
        )
    }

    /// Adaptation scheme, if any. `akf` takes the configured scheme.
    pub fn scheme(self, akf: AdaptationScheme) -> Option<AdaptationScheme> {
        match self {
            FilterVariant::Ekf | FilterVariant::Mcckf => None,
            FilterVariant::Akf => Some(akf),
            FilterVariant::RAmcckf => Some(AdaptationScheme::Residual),
            FilterVariant::VbAmcckf => Some(AdaptationScheme::VariationalBayes),
        }
    }
}

impl fmt::Display for FilterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "filter",
                    format!("unknown variant `{s}`, expected ekf|akf|mcckf|r-amcckf|vb-amcckf"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptationScheme {
    Residual,
    VariationalBayes,
}

impl FromStr for AdaptationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" | "r" => Ok(AdaptationScheme::Residual),
            "vb" => Ok(AdaptationScheme::VariationalBayes),
            _ => Err(Error::config(
                "akf_scheme",
                format!("unknown scheme `{s}`, expected residual|vb"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensorConfig {
    pub id: SensorId,
    pub initial_noise: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub variant: FilterVariant,
    pub sensors: Vec<SensorConfig>,
    /// Per-IMU-step process noise `Q̂₀`.
    pub process_noise: DMatrix<f64>,
    pub initial_covariance: DMatrix<f64>,
    pub gravity: Vector3<f64>,
    pub window: usize,
    pub forgetting: f64,
    pub bandwidth: BandwidthMode,
    /// Residual scheme `R̂` blend factor.
    pub smoothing: f64,
    pub adapt_process_noise: bool,
    pub akf_scheme: AdaptationScheme,
    pub q_gamma: GammaForm,
    pub diagonal_q: bool,
    /// Keep only the diagonal of every new `R̂`, so an inflated channel
    /// cannot leak into the others through estimated correlations.
    pub diagonal_r: bool,
    /// Events older than the latest processed time by more than this are
    /// dropped.
    pub time_tolerance: f64,
}

/// Bandwidth clamps for pose/velocity fusion. The floor keeps the kernel at
/// least as wide as a unit Gaussian in normalised units so that a moderate
/// state error cannot make every measurement look like an outlier.
pub const FUSION_BANDWIDTH: BandwidthBounds = BandwidthBounds { min: 2.0, max: 1e6 };

impl FusionConfig {
    pub fn new(variant: FilterVariant, sensors: &[&str]) -> Self {
        let akf_scheme = AdaptationScheme::VariationalBayes;
        FusionConfig {
            variant,
            sensors: sensors
                .iter()
                .map(|s| SensorConfig {
                    id: SensorId::new(*s),
                    initial_noise: DMatrix::identity(ERROR_DIM, ERROR_DIM) * 0.01,
                })
                .collect(),
            process_noise: DMatrix::identity(ERROR_DIM, ERROR_DIM) * 1e-6,
            initial_covariance: DMatrix::identity(ERROR_DIM, ERROR_DIM) * 1e-2,
            gravity: default_gravity(),
            window: 10,
            forgetting: 0.97,
            bandwidth: BandwidthMode::Adaptive(FUSION_BANDWIDTH),
            smoothing: 1.0,
            // the residual Q̂ over a 10-step window is too noisy for nine states
            adapt_process_noise: variant.scheme(akf_scheme) != Some(AdaptationScheme::Residual),
            akf_scheme,
            q_gamma: GammaForm::Innovation,
            diagonal_q: false,
            diagonal_r: true,
            time_tolerance: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(Error::config(
                "sensors",
                "at least one odometry sensor is required",
            ));
        }
        check_psd("Q0", &self.process_noise)?;
        check_psd("P0", &self.initial_covariance)?;
        for s in &self.sensors {
            check_psd(&format!("R0[{}]", s.id), &s.initial_noise)?;
            if linalg::spd_inverse(&s.initial_noise).is_none() {
                return Err(Error::config(format!("R0[{}]", s.id), "must be invertible"));
            }
        }
        if self.window == 0 {
            return Err(Error::config("window", "window length must be at least 1"));
        }
        if !(0.9..=1.0).contains(&self.forgetting) {
            return Err(Error::config(
                "rho",
                format!(
                    "forgetting factor must lie in [0.9, 1], got {}",
                    self.forgetting
                ),
            ));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::config("beta", "smoothing factor must lie in (0, 1]"));
        }
        if let BandwidthMode::Static(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("sigma", "static bandwidth must be positive"));
            }
        }
        if !(self.time_tolerance >= 0.0) {
            return Err(Error::config("time_tolerance", "must be non-negative"));
        }
        Ok(())
    }
}

fn check_psd(field: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != ERROR_DIM || m.ncols() != ERROR_DIM {
        return Err(Error::config(
            field,
            format!(
                "expected a {ERROR_DIM}x{ERROR_DIM} matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::config(field, "contains non-finite entries"));
    }
    if linalg::asymmetry(m) > 1e-9 * m.amax().max(1.0) {
        return Err(Error::config(field, "must be symmetric"));
    }
    if linalg::min_eigenvalue(m) < -1e-12 * m.amax().max(1.0) {
        return Err(Error::config(field, "must be positive semidefinite"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct SensorSlot {
    noise: DMatrix<f64>,
    bandwidth: BandwidthState,
    corrections: usize,
}

#[derive(Debug, Clone)]
enum Adapter {
    Fixed,
    Residual(ResidualAdaptation),
    Vb(VbAdaptation),
}

/// Linearised transition and noise accumulated since the last correction.
#[derive(Debug, Clone)]
struct Interval {
    transition: DMatrix<f64>,
    noise: DMatrix<f64>,
    steps: usize,
}

impl Interval {
    fn new() -> Self {
        Interval {
            transition: DMatrix::identity(ERROR_DIM, ERROR_DIM),
            noise: DMatrix::zeros(ERROR_DIM, ERROR_DIM),
            steps: 0,
        }
    }
}

/// Summary of one odometry correction.
#[derive(Debug, Clone)]
pub struct CorrectionReport {
    pub time: f64,
    pub sensor: SensorId,
    pub innovation: DVector<f64>,
    pub weights: CorrentropyWeights,
    pub bandwidth: DVector<f64>,
    /// `R̂` of the sensor after adaptation.
    pub noise: DMatrix<f64>,
    pub antipodal: bool,
    pub regularized: bool,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    /// First IMU sample: stored, nothing propagated.
    Initialized,
    Predicted,
    Corrected(Box<CorrectionReport>),
}

/// Multi-sensor ESKF consuming a merged, time-ordered event stream.
#[derive(Debug, Clone)]
pub struct FusionEngine {
    config: FusionConfig,
    nominal: NominalState,
    covariance: DMatrix<f64>,
    process_noise: DMatrix<f64>,
    sensors: BTreeMap<SensorId, SensorSlot>,
    adapter: Adapter,
    held_imu: Option<ImuSample>,
    interval: Interval,
    dropped: usize,
    steps: usize,
}

impl FusionEngine {
    pub fn new(config: FusionConfig, initial: NominalState) -> Result<Self> {
        config.validate()?;
        let kernel = config.variant.uses_kernel();
        let sensors = config
            .sensors
            .iter()
            .map(|s| {
                let mode = if kernel {
                    config.bandwidth
                } else {
                    BandwidthMode::Static(f64::INFINITY)
                };
                let slot = SensorSlot {
                    noise: s.initial_noise.clone(),
                    bandwidth: BandwidthState::new(ERROR_DIM, mode),
                    corrections: 0,
                };
                (s.id.clone(), slot)
            })
            .collect();
        let adapter = match config.variant.scheme(config.akf_scheme) {
            None => Adapter::Fixed,
            Some(AdaptationScheme::Residual) => {
                Adapter::Residual(ResidualAdaptation::new(ResidualSettings {
                    window: config.window,
                    smoothing: config.smoothing,
                    primary: config.sensors.first().map(|s| s.id.clone()),
                    q_gamma: config.q_gamma,
                    diagonal_q: config.diagonal_q,
                    diagonal_r: config.diagonal_r,
                })?)
            }
            Some(AdaptationScheme::VariationalBayes) => Adapter::Vb(VbAdaptation::new(
                config.window,
                config.forgetting,
                ERROR_DIM,
            )?),
        };
        Ok(FusionEngine {
            covariance: symmetrize(&config.initial_covariance),
            process_noise: config.process_noise.clone(),
            nominal: initial,
            sensors,
            adapter,
            held_imu: None,
            interval: Interval::new(),
            dropped: 0,
            steps: 0,
            config,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn nominal(&self) -> &NominalState {
        &self.nominal
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.process_noise
    }

    /// Error-state mean between events, always zero after reset.
    pub fn error_mean(&self) -> DVector<f64> {
        DVector::zeros(ERROR_DIM)
    }

    pub fn measurement_noise(&self, sensor: &SensorId) -> Option<&DMatrix<f64>> {
        self.sensors.get(sensor).map(|s| &s.noise)
    }

    pub fn bandwidth(&self, sensor: &SensorId) -> Option<&DVector<f64>> {
        self.sensors.get(sensor).map(|s| s.bandwidth.sigma())
    }

    pub fn corrections(&self, sensor: &SensorId) -> Option<usize> {
        self.sensors.get(sensor).map(|s| s.corrections)
    }

    pub fn sensor_ids(&self) -> impl Iterator<Item = &SensorId> {
        self.sensors.keys()
    }

    /// Events rejected for arriving out of order.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Prediction steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Process one event. Out-of-order events beyond the tolerance are
    /// counted and returned as an error without touching the state.
    pub fn fuse_step(&mut self, event: &SensorEvent) -> Result<StepOutcome> {
        let t = event.time();
        if !t.is_finite() {
            return Err(match event {
                SensorEvent::Imu(s) => Error::NonFiniteImu { time: s.time },
                SensorEvent::Odometry(s) => Error::NonFiniteMeasurement {
                    sensor: s.sensor.0.clone(),
                    index: 0,
                },
            });
        }
        if self.held_imu.is_some() && t < self.nominal.time - self.config.time_tolerance {
            self.dropped += 1;
            log::warn!(
                "dropping event at t={t}: latest processed time is {}",
                self.nominal.time
            );
            return Err(Error::OutOfOrder {
                time: t,
                latest: self.nominal.time,
            });
        }
        match event {
            SensorEvent::Imu(imu) => self.on_imu(imu),
            SensorEvent::Odometry(z) => self.on_odometry(z),
        }
    }

    fn on_imu(&mut self, imu: &ImuSample) -> Result<StepOutcome> {
        if !imu.is_finite() {
            return Err(Error::NonFiniteImu { time: imu.time });
        }
        let outcome = if self.held_imu.is_none() {
            self.nominal.time = imu.time;
            StepOutcome::Initialized
        } else {
            self.advance_to(imu.time)?;
            StepOutcome::Predicted
        };
        self.held_imu = Some(*imu);
        Ok(outcome)
    }

    /// Propagate with the held IMU sample up to `t`.
    fn advance_to(&mut self, t: f64) -> Result<()> {
        let dt = t - self.nominal.time;
        let Some(imu) = self.held_imu else {
            return Ok(());
        };
        if !(dt > 0.0) {
            return Ok(());
        }
        let f = error_transition(&self.nominal, &imu, dt);
        let next = propagate_nominal(&self.nominal, &imu, &self.config.gravity, dt)?;
        self.nominal = next;
        self.nominal.time = t;
        self.covariance =
            symmetrize(&(&f * &self.covariance * f.transpose() + &self.process_noise));
        self.interval.noise =
            symmetrize(&(&f * &self.interval.noise * f.transpose() + &self.process_noise));
        self.interval.transition = &f * &self.interval.transition;
        self.interval.steps += 1;
        self.steps += 1;
        Ok(())
    }

    fn on_odometry(&mut self, z: &OdometrySample) -> Result<StepOutcome> {
        let sensor = z.sensor.clone();
        if !self.sensors.contains_key(&sensor) {
            return Err(Error::UnknownSensor(sensor.0));
        }
        let values = DVector::from_iterator(
            10,
            z.position
                .iter()
                .chain(z.orientation.coords.iter())
                .chain(z.velocity.iter())
                .copied(),
        );
        if let Some(index) = linalg::all_finite(&values) {
            return Err(Error::NonFiniteMeasurement {
                sensor: sensor.0,
                index,
            });
        }
        let norm = z.orientation.quaternion().norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidMeasurement {
                sensor: sensor.0,
                reason: format!("quaternion norm {norm} is not unit"),
            });
        }
        self.advance_to(z.time)?;

        let obs = observation_residual(&self.nominal, z);
        if obs.antipodal {
            log::warn!("sensor {sensor}: attitude innovation at π, shortest branch taken");
        }
        let kernel = self.config.variant.uses_kernel();
        let slot = self.sensors.get_mut(&sensor).expect("checked above");
        let noise = slot.noise.clone();
        let weights = if kernel {
            let sigma =
                slot.bandwidth
                    .update(&obs.innovation, &noise, &obs.jacobian, &self.covariance);
            correntropy_weights(&obs.innovation, &noise, sigma)
        } else {
            CorrentropyWeights::unit(ERROR_DIM)
        };
        let prior = GaussianBelief {
            mean: DVector::zeros(ERROR_DIM),
            covariance: self.covariance.clone(),
            time: self.nominal.time,
        };
        let correction = correct(
            &prior,
            &obs.innovation,
            &obs.jacobian,
            &noise,
            &weights.weighted,
        )?;
        let dx = correction.belief.mean.clone();
        self.nominal = inject_and_reset(&self.nominal, &dx);
        self.covariance = correction.belief.covariance.clone();
        let residual = observation_residual(&self.nominal, z).innovation;

        let record = InnovationRecord {
            time: self.nominal.time,
            sensor: sensor.clone(),
            innovation: obs.innovation.clone(),
            residual,
            observation_jacobian: obs.jacobian,
            predicted_mean: prior.mean,
            predicted_covariance: prior.covariance,
            posterior_mean: dx,
            posterior_covariance: correction.belief.covariance,
            gain: correction.gain,
            noise: noise.clone(),
            weights: weights.clone(),
            regularized: correction.regularized,
        };
        let interval = std::mem::replace(&mut self.interval, Interval::new());
        let snapshot = WindowSnapshot {
            record,
            transition: interval.transition,
            process_noise: interval.noise,
            steps: interval.steps,
        };

        let (new_r, new_q) = match &mut self.adapter {
            Adapter::Fixed => (None, None),
            Adapter::Residual(a) => {
                let est = a.observe(&snapshot, &noise)?;
                (Some(est.measurement_noise), est.process_noise)
            }
            Adapter::Vb(a) => {
                let est = a.observe(snapshot)?;
                let r = match est.measurement_noise {
                    Some(r) if self.config.diagonal_r => {
                        Some(DMatrix::from_diagonal(&r.diagonal()))
                    }
                    r => r,
                };
                (r, est.process_noise)
            }
        };
        let slot = self.sensors.get_mut(&sensor).expect("checked above");
        if let Some(r) = new_r {
            if usable(&r) {
                slot.noise = r;
            } else {
                log::warn!("sensor {sensor}: discarding singular or non-finite R estimate");
            }
        }
        if self.config.adapt_process_noise {
            if let Some(q) = new_q {
                if q.iter().all(|x| x.is_finite()) {
                    self.process_noise = q;
                }
            }
        }
        slot.corrections += 1;

        Ok(StepOutcome::Corrected(Box::new(CorrectionReport {
            time: self.nominal.time,
            sensor,
            innovation: obs.innovation,
            weights,
            bandwidth: slot.bandwidth.sigma().clone(),
            noise: slot.noise.clone(),
            antipodal: obs.antipodal,
            regularized: correction.regularized,
        })))
    }
}

fn usable(r: &DMatrix<f64>) -> bool {
    r.iter().all(|x| x.is_finite()) && linalg::spd_inverse(r).is_some_and(|inv| !inv.regularized)
}
