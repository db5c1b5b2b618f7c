//! Synthetic ground truth and sensor streams.
//!
//! Trajectories are analytic, so IMU samples come from exact differentiation
//! of the truth and the ground truth used for RMSE is exact. Odometry sources
//! add Gaussian noise, Bernoulli-triggered held jumps and optional linear
//! drift episodes on top of the true pose and velocity.

use std::f64::consts::TAU;

use nalgebra::{DMatrix, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::eskf::{
    canonical_quaternion, default_gravity, quat_exp, ImuSample, NominalState, OdometrySample,
    SensorEvent, ERROR_DIM,
};
use crate::{Error, Result, SensorId};

/// Noise channels in measurement order: position, attitude, velocity.
pub type Channels = [f64; 9];

const POSITION_AND_VELOCITY: [usize; 6] = [0, 1, 2, 6, 7, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub gaussian_std: Channels,
    /// Per-sample probability of starting (or restarting) a jump.
    pub jump_probability: f64,
    /// Jump size as a multiple of the channel's standard deviation.
    pub jump_magnitude: f64,
    /// Samples a jump is held for.
    pub jump_duration: usize,
    /// Linear drift per second on each channel while an episode is active.
    pub drift_rate: Channels,
    pub drift_start: f64,
    pub drift_duration: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(position: f64, attitude: f64, velocity: f64) -> Self {
        NoiseSpec {
            gaussian_std: [
                position, position, position, attitude, attitude, attitude, velocity, velocity,
                velocity,
            ],
            jump_probability: 0.0,
            jump_magnitude: 0.0,
            jump_duration: 1,
            drift_rate: [0.0; 9],
            drift_start: 0.0,
            drift_duration: 0.0,
            seed: 0,
        }
    }

    pub fn with_jumps(mut self, probability: f64, magnitude: f64, duration: usize) -> Self {
        self.jump_probability = probability;
        self.jump_magnitude = magnitude;
        self.jump_duration = duration;
        self
    }

    /// Drift on the position and velocity channels over `[start, start + duration)`.
    pub fn with_drift(mut self, rate: f64, start: f64, duration: f64) -> Self {
        for c in POSITION_AND_VELOCITY {
            self.drift_rate[c] = rate;
        }
        self.drift_start = start;
        self.drift_duration = duration;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.jump_probability) {
            return Err(Error::config("jump_probability", "must lie in [0, 1]"));
        }
        if self
            .gaussian_std
            .iter()
            .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(Error::config(
                "gaussian_std",
                "standard deviations must be finite and >= 0",
            ));
        }
        if !(self.jump_magnitude >= 0.0) || self.jump_duration == 0 {
            return Err(Error::config(
                "jump",
                "magnitude must be >= 0 and duration >= 1",
            ));
        }
        if self.drift_rate.iter().any(|r| !r.is_finite()) || !(self.drift_duration >= 0.0) {
            return Err(Error::config(
                "drift",
                "rates must be finite and duration >= 0",
            ));
        }
        Ok(())
    }

    fn drift_active(&self, t: f64) -> Option<f64> {
        let elapsed = t - self.drift_start;
        (elapsed >= 0.0 && elapsed < self.drift_duration).then_some(elapsed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometrySpec {
    pub id: SensorId,
    pub rate: f64,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    pub accel_std: f64,
    pub gyro_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryKind {
    Hover {
        position: Vector3<f64>,
        yaw: f64,
    },
    /// Minimum-jerk quintic segments of equal duration through the waypoints.
    WaypointTraverse {
        waypoints: Vec<Vector3<f64>>,
    },
    /// Lissajous figure eight with a gentle yaw and roll oscillation.
    FigureEight {
        center: Vector3<f64>,
        radius: f64,
        period: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub imu_rate: f64,
    pub sensors: Vec<OdometrySpec>,
    pub imu_noise: ImuNoise,
    pub gravity: Vector3<f64>,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Two VIO-like sources at 20 Hz over the given trajectory.
    pub fn two_sensor(kind: TrajectoryKind, duration: f64) -> Self {
        let noise = NoiseSpec::gaussian(0.05, 0.01, 0.05);
        ScenarioSpec {
            kind,
            duration,
            imu_rate: 200.0,
            sensors: vec![
                OdometrySpec {
                    id: SensorId::new("vio0"),
                    rate: 20.0,
                    noise: noise.clone(),
                },
                OdometrySpec {
                    id: SensorId::new("vio1"),
                    rate: 20.0,
                    noise,
                },
            ],
            imu_noise: ImuNoise {
                accel_std: 0.05,
                gyro_std: 0.005,
            },
            gravity: default_gravity(),
            seed: 0,
        }
    }

    /// Named scenarios used by the command-line tool.
    pub fn preset(name: &str) -> Result<Self> {
        let hover = TrajectoryKind::Hover {
            position: Vector3::new(0.0, 0.0, 1.5),
            yaw: 0.0,
        };
        let figure_eight = TrajectoryKind::FigureEight {
            center: Vector3::new(0.0, 0.0, 1.5),
            radius: 2.0,
            period: 20.0,
        };
        let spec = match name {
            "hover" => Self::two_sensor(hover, 60.0),
            "figure-eight" => Self::two_sensor(figure_eight, 60.0),
            "traverse" => Self::two_sensor(
                TrajectoryKind::WaypointTraverse {
                    waypoints: vec![
                        Vector3::new(0.0, 0.0, 1.0),
                        Vector3::new(3.0, 0.0, 1.5),
                        Vector3::new(3.0, 4.0, 1.5),
                        Vector3::new(0.0, 4.0, 1.0),
                    ],
                },
                30.0,
            ),
            "outliers" => {
                let mut s = Self::two_sensor(figure_eight, 30.0);
                for o in &mut s.sensors {
                    o.noise = o.noise.clone().with_jumps(0.05, 50.0, 1);
                }
                s
            }
            "divergence" => {
                let mut s = Self::two_sensor(hover, 30.0);
                s.sensors[1].noise = s.sensors[1].noise.clone().with_drift(0.5, 10.0, 5.0);
                s
            }
            _ => {
                return Err(Error::config(
                    "scenario",
                    format!(
                        "unknown scenario `{name}`, expected hover|figure-eight|traverse|outliers|divergence"
                    ),
                ))
            }
        };
        Ok(spec.with_seed(0))
    }

    pub const PRESETS: [&'static str; 5] = [
        "hover",
        "figure-eight",
        "traverse",
        "outliers",
        "divergence",
    ];

    /// Reseed the IMU and every sensor deterministically from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for (i, s) in self.sensors.iter_mut().enumerate() {
            s.noise.seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64 + 1);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration", "must be positive"));
        }
        if !(self.imu_rate > 0.0 && self.imu_rate.is_finite()) {
            return Err(Error::config("imu_rate", "must be positive"));
        }
        for s in &self.sensors {
            if !(s.rate > 0.0 && s.rate <= self.imu_rate) {
                return Err(Error::config(
                    format!("rate[{}]", s.id),
                    "must be positive and not exceed the IMU rate",
                ));
            }
            s.noise.validate()?;
        }
        if let TrajectoryKind::WaypointTraverse { waypoints } = &self.kind {
            if waypoints.len() < 2 {
                return Err(Error::config("waypoints", "need at least two waypoints"));
            }
        }
        if !(self.imu_noise.accel_std >= 0.0 && self.imu_noise.gyro_std >= 0.0) {
            return Err(Error::config(
                "imu_noise",
                "standard deviations must be >= 0",
            ));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.imu_rate
    }

    /// Per-step process noise of the error state implied by the IMU noise.
    pub fn process_noise(&self) -> DMatrix<f64> {
        let dt = self.dt();
        let mut q = DMatrix::zeros(ERROR_DIM, ERROR_DIM);
        for i in 0..3 {
            q[(3 + i, 3 + i)] = (self.imu_noise.accel_std * dt).powi(2);
            q[(6 + i, 6 + i)] = (self.imu_noise.gyro_std * dt).powi(2);
        }
        q
    }

    fn odometry_stride(&self, rate: f64) -> usize {
        ((self.imu_rate / rate).round() as usize).max(1)
    }
}

/// Exact kinematics at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSample {
    pub state: NominalState,
    /// World-frame acceleration.
    pub acceleration: Vector3<f64>,
    /// Body-frame angular rate.
    pub angular_rate: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rate: f64,
    pub samples: Vec<TruthSample>,
}

impl Trajectory {
    /// Truth at the grid point nearest to `t`.
    pub fn at(&self, t: f64) -> Option<&TruthSample> {
        let k = (t * self.rate).round();
        if k < 0.0 {
            return None;
        }
        self.samples.get(k as usize)
    }

    pub fn states(&self) -> impl Iterator<Item = &NominalState> {
        self.samples.iter().map(|s| &s.state)
    }
}

fn min_jerk(tau: f64) -> (f64, f64, f64) {
    let t2 = tau * tau;
    let t3 = t2 * tau;
    (
        t3 * (10.0 - 15.0 * tau + 6.0 * t2),
        30.0 * t2 * (1.0 - 2.0 * tau + t2),
        60.0 * tau - 180.0 * t2 + 120.0 * t3,
    )
}

fn kinematics(kind: &TrajectoryKind, duration: f64, t: f64) -> TruthSample {
    let (position, velocity, acceleration, orientation, angular_rate) = match kind {
        TrajectoryKind::Hover { position, yaw } => (
            *position,
            Vector3::zeros(),
            Vector3::zeros(),
            UnitQuaternion::from_euler_angles(0.0, 0.0, *yaw),
            Vector3::zeros(),
        ),
        TrajectoryKind::WaypointTraverse { waypoints } => {
            let segments = waypoints.len() - 1;
            let seg_time = duration / segments as f64;
            let i = ((t / seg_time).floor() as usize).min(segments - 1);
            let tau = ((t - i as f64 * seg_time) / seg_time).clamp(0.0, 1.0);
            let (s, ds, dds) = min_jerk(tau);
            let delta = waypoints[i + 1] - waypoints[i];
            (
                waypoints[i] + delta * s,
                delta * (ds / seg_time),
                delta * (dds / (seg_time * seg_time)),
                UnitQuaternion::identity(),
                Vector3::zeros(),
            )
        }
        TrajectoryKind::FigureEight {
            center,
            radius,
            period,
        } => {
            let w = TAU / period;
            let (s1, c1) = (w * t).sin_cos();
            let (s2, c2) = (2.0 * w * t).sin_cos();
            let position = center + Vector3::new(radius * s1, 0.5 * radius * s2, 0.1 * s1);
            let velocity = Vector3::new(radius * w * c1, radius * w * c2, 0.1 * w * c1);
            let acceleration = Vector3::new(
                -radius * w * w * s1,
                -2.0 * radius * w * w * s2,
                -0.1 * w * w * s1,
            );
            let (yaw, yaw_rate) = (0.3 * s1, 0.3 * w * c1);
            let (roll, roll_rate) = (0.1 * s2, 0.2 * w * c2);
            let r_x = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), roll);
            let r_z = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
            // R = Rz(ψ) Rx(φ), body rate = Rxᵀ ψ̇ e_z + φ̇ e_x
            let angular_rate = r_x.inverse() * Vector3::new(0.0, 0.0, yaw_rate)
                + Vector3::new(roll_rate, 0.0, 0.0);
            (position, velocity, acceleration, r_z * r_x, angular_rate)
        }
    };
    TruthSample {
        state: NominalState {
            position,
            velocity,
            orientation,
            time: t,
        },
        acceleration,
        angular_rate,
    }
}

/// Truth on the IMU grid `t_k = k / imu_rate`, `k = 0 ..= duration·imu_rate`.
pub fn generate_truth(spec: &ScenarioSpec) -> Result<Trajectory> {
    spec.validate()?;
    let n = (spec.duration * spec.imu_rate).round() as usize;
    let samples = (0..=n)
        .map(|k| kinematics(&spec.kind, spec.duration, k as f64 / spec.imu_rate))
        .collect();
    Ok(Trajectory {
        rate: spec.imu_rate,
        samples,
    })
}

/// Additive odometry error process of one sensor.
#[derive(Debug, Clone)]
pub struct OdometryNoise {
    spec: NoiseSpec,
    rng: ChaCha8Rng,
    jump: [f64; 9],
    jump_left: usize,
    jumps_started: usize,
}

impl OdometryNoise {
    pub fn new(spec: NoiseSpec) -> Self {
        OdometryNoise {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            jump: [0.0; 9],
            jump_left: 0,
            jumps_started: 0,
        }
    }

    /// Number of jumps triggered so far.
    pub fn jumps_started(&self) -> usize {
        self.jumps_started
    }

    /// Error for the sample at time `t`, in measurement channel order.
    pub fn sample(&mut self, t: f64) -> Channels {
        let mut e = [0.0; 9];
        for (c, value) in e.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *value = self.spec.gaussian_std[c] * z;
        }
        if self.spec.jump_probability > 0.0 && self.rng.random_bool(self.spec.jump_probability) {
            self.jumps_started += 1;
            self.jump_left = self.spec.jump_duration;
            self.jump = [0.0; 9];
            for c in POSITION_AND_VELOCITY {
                let sign = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                self.jump[c] = sign * self.spec.jump_magnitude * self.spec.gaussian_std[c];
            }
        }
        if self.jump_left > 0 {
            self.jump_left -= 1;
            for c in 0..9 {
                e[c] += self.jump[c];
            }
        }
        if let Some(elapsed) = self.spec.drift_active(t) {
            for c in 0..9 {
                e[c] += self.spec.drift_rate[c] * elapsed;
            }
        }
        e
    }
}

/// Apply a channel error to a true state.
pub fn corrupt(truth: &NominalState, sensor: &SensorId, e: &Channels) -> OdometrySample {
    let dtheta = Vector3::new(e[3], e[4], e[5]);
    OdometrySample {
        time: truth.time,
        sensor: sensor.clone(),
        position: truth.position + Vector3::new(e[0], e[1], e[2]),
        orientation: canonical_quaternion(&(quat_exp(&dtheta) * truth.orientation)),
        velocity: truth.velocity + Vector3::new(e[6], e[7], e[8]),
    }
}

/// Merged stream: IMU at every grid point, each sensor every
/// `imu_rate / rate` points with a per-sensor phase. At equal timestamps the
/// IMU sample precedes odometry, and sensors keep their configured order.
pub fn sample_sensors(truth: &Trajectory, spec: &ScenarioSpec) -> Result<Vec<SensorEvent>> {
    spec.validate()?;
    let mut imu_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noises: Vec<OdometryNoise> = spec
        .sensors
        .iter()
        .map(|s| OdometryNoise::new(s.noise.clone()))
        .collect();
    let strides: Vec<usize> = spec
        .sensors
        .iter()
        .map(|s| spec.odometry_stride(s.rate))
        .collect();
    let mut events = Vec::with_capacity(truth.samples.len() * (1 + spec.sensors.len()));
    let mut gauss = |std: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut imu_rng);
        std * z
    };

    for (k, sample) in truth.samples.iter().enumerate() {
        let x = &sample.state;
        let specific_force = x.orientation.inverse() * (sample.acceleration - spec.gravity);
        let a = spec.imu_noise.accel_std;
        let g = spec.imu_noise.gyro_std;
        events.push(SensorEvent::Imu(ImuSample {
            time: x.time,
            specific_force: specific_force + Vector3::new(gauss(a), gauss(a), gauss(a)),
            angular_rate: sample.angular_rate + Vector3::new(gauss(g), gauss(g), gauss(g)),
        }));
        if k == 0 {
            continue;
        }
        for (i, s) in spec.sensors.iter().enumerate() {
            let stride = strides[i];
            if k % stride == i % stride {
                let e = noises[i].sample(x.time);
                events.push(SensorEvent::Odometry(corrupt(x, &s.id, &e)));
            }
        }
    }
    Ok(events)
}

/// Truth plus stream in one call.
pub fn simulate(spec: &ScenarioSpec) -> Result<(Trajectory, Vec<SensorEvent>)> {
    let truth = generate_truth(spec)?;
    let events = sample_sensors(&truth, spec)?;
    Ok((truth, events))
}
