//! Prediction and correction on dense Gaussian beliefs.
//!
//! The correction is the maximum correntropy criterion (MCC) update: every
//! measurement dimension is scaled by a Gaussian-kernel weight of its
//! normalised innovation before the gain is formed, so a dimension hit by a
//! large outlier drops out of the update instead of dragging the state. The
//! plain KF/EKF correction is the same code path with all weights set to one.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{self, symmetrize};
use crate::{Error, Result, SensorId};

/// Lowest exponent fed to `exp` when evaluating the kernel.
pub const KERNEL_EXPONENT_FLOOR: f64 = -700.0;

/// Mean, covariance and timestamp of the filter posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub time: f64,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, time: f64) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::Dimension {
                context: "belief covariance",
                expected: n,
                actual: covariance.nrows(),
            });
        }
        Ok(GaussianBelief {
            mean,
            covariance: symmetrize(&covariance),
            time,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// State transition `f(x, u, dt)` with its Jacobian and the process noise
/// currently in force.
pub trait ProcessModel {
    fn transition(&self, state: &DVector<f64>, input: &DVector<f64>, dt: f64) -> DVector<f64>;
    fn jacobian(&self, state: &DVector<f64>, input: &DVector<f64>, dt: f64) -> DMatrix<f64>;
    fn noise(&self) -> &DMatrix<f64>;
}

/// `x' = F x + B u` with fixed matrices.
#[derive(Debug, Clone)]
pub struct LinearProcess {
    pub transition: DMatrix<f64>,
    pub control: Option<DMatrix<f64>>,
    pub noise: DMatrix<f64>,
}

impl LinearProcess {
    pub fn new(transition: DMatrix<f64>, noise: DMatrix<f64>) -> Self {
        LinearProcess {
            transition,
            control: None,
            noise,
        }
    }
}

impl ProcessModel for LinearProcess {
    fn transition(&self, state: &DVector<f64>, input: &DVector<f64>, _dt: f64) -> DVector<f64> {
        let mut next = &self.transition * state;
        if let Some(b) = &self.control {
            next += b * input;
        }
        next
    }

    fn jacobian(&self, _state: &DVector<f64>, _input: &DVector<f64>, _dt: f64) -> DMatrix<f64> {
        self.transition.clone()
    }

    fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }
}

/// Observation function `h(x)` and its Jacobian.
pub trait MeasurementFunction {
    fn observe(&self, state: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, state: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub struct LinearObservation(pub DMatrix<f64>);

impl MeasurementFunction for LinearObservation {
    fn observe(&self, state: &DVector<f64>) -> DVector<f64> {
        &self.0 * state
    }

    fn jacobian(&self, _state: &DVector<f64>) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// One measurement source: its observation function, the noise covariance
/// `R̂` and the per-dimension kernel bandwidth `σ̂`.
#[derive(Debug, Clone)]
pub struct MeasurementModel<M> {
    pub sensor: SensorId,
    pub function: M,
    pub noise: DMatrix<f64>,
    pub bandwidth: DVector<f64>,
}

/// Kernel weights per measurement dimension.
///
/// `weighted` (C) uses the `R̂⁻¹`-normalised innovation and drives the gain;
/// `unweighted` (L) uses the raw innovation and protects the noise
/// statistics of the adaptation schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrentropyWeights {
    pub unweighted: DVector<f64>,
    pub weighted: DVector<f64>,
}

impl CorrentropyWeights {
    /// All weights equal to one; turns the MCC correction into the KF one.
    pub fn unit(m: usize) -> Self {
        CorrentropyWeights {
            unweighted: DVector::from_element(m, 1.0),
            weighted: DVector::from_element(m, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.weighted.len()
    }
}

/// Per-update record consumed by the noise adaptation schemes.
#[derive(Debug, Clone)]
pub struct InnovationRecord {
    pub time: f64,
    pub sensor: SensorId,
    /// `ỹ = z − h(x̂⁻)`
    pub innovation: DVector<f64>,
    /// `r = z − h(x̂⁺)`
    pub residual: DVector<f64>,
    pub observation_jacobian: DMatrix<f64>,
    pub predicted_mean: DVector<f64>,
    pub predicted_covariance: DMatrix<f64>,
    pub posterior_mean: DVector<f64>,
    pub posterior_covariance: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// `R̂` in force for this update.
    pub noise: DMatrix<f64>,
    pub weights: CorrentropyWeights,
    /// A ridge was needed to invert `P⁻¹ + Hᵀ C R̂⁻¹ H`.
    pub regularized: bool,
}

/// Filter state between corrections, as stored by the sliding windows: the
/// update record plus the linearised transition that led into it.
#[derive(Debug, Clone)]
pub struct WindowSnapshot {
    pub record: InnovationRecord,
    /// Transition from the previous snapshot's posterior to this prior.
    pub transition: DMatrix<f64>,
    /// Process noise accumulated over the same interval.
    pub process_noise: DMatrix<f64>,
    /// Number of discrete prediction steps in the interval.
    pub steps: usize,
}

impl WindowSnapshot {
    pub fn time(&self) -> f64 {
        self.record.time
    }
}

/// Output of [`correct`].
#[derive(Debug, Clone)]
pub struct Correction {
    pub belief: GaussianBelief,
    pub gain: DMatrix<f64>,
    pub regularized: bool,
}

pub fn predict<P: ProcessModel>(
    belief: &GaussianBelief,
    model: &P,
    input: &DVector<f64>,
    dt: f64,
) -> Result<GaussianBelief> {
    if !(dt > 0.0) {
        return Err(Error::InvalidTimeStep(dt));
    }
    let mean = model.transition(&belief.mean, input, dt);
    if let Some(index) = linalg::all_finite(&mean) {
        return Err(Error::PropagationFailure { index });
    }
    let f = model.jacobian(&belief.mean, input, dt);
    let covariance = symmetrize(&(&f * &belief.covariance * f.transpose() + model.noise()));
    Ok(GaussianBelief {
        mean,
        covariance,
        time: belief.time + dt,
    })
}

#[inline]
fn kernel(exponent: f64) -> f64 {
    exponent.max(KERNEL_EXPONENT_FLOOR).exp()
}

/// Per-dimension correntropy weights
/// `C_j = exp(−y_j² / (2 σ_j² R_jj))` and `L_j = exp(−y_j² / (2 σ_j²))`.
///
/// Only the diagonal of `noise` enters the kernel.
pub fn correntropy_weights(
    innovation: &DVector<f64>,
    noise: &DMatrix<f64>,
    bandwidth: &DVector<f64>,
) -> CorrentropyWeights {
    let m = innovation.len();
    debug_assert_eq!(bandwidth.len(), m);
    let mut weighted = DVector::zeros(m);
    let mut unweighted = DVector::zeros(m);
    for j in 0..m {
        let y2 = innovation[j] * innovation[j];
        let two_s2 = 2.0 * bandwidth[j] * bandwidth[j];
        unweighted[j] = kernel(-y2 / two_s2);
        weighted[j] = kernel(-y2 / (two_s2 * noise[(j, j)]));
    }
    CorrentropyWeights {
        unweighted,
        weighted,
    }
}

fn invert_gain_matrix(a: &DMatrix<f64>) -> Result<linalg::Inverse> {
    let scale = a.amax().max(1.0);
    if linalg::asymmetry(a) <= 1e-12 * scale {
        return linalg::spd_inverse(a).ok_or(Error::Singular("MCC gain"));
    }
    // C R̂⁻¹ is not symmetric once R̂ has off-diagonal terms.
    if let Some(matrix) = a.clone().try_inverse() {
        return Ok(linalg::Inverse {
            matrix,
            regularized: false,
        });
    }
    let mut shifted = a.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] += linalg::RIDGE * scale;
    }
    shifted
        .try_inverse()
        .map(|matrix| linalg::Inverse {
            matrix,
            regularized: true,
        })
        .ok_or(Error::Singular("MCC gain"))
}

/// Linearised correction with explicit gain weights `c` (the diagonal of C).
///
/// `K = (P⁻¹ + Hᵀ C R̂⁻¹ H)⁻¹ Hᵀ C R̂⁻¹`, mean `x + K ỹ`, Joseph-form
/// covariance `(I − KH) P (I − KH)ᵀ + K R̂ Kᵀ`.
pub fn correct(
    belief: &GaussianBelief,
    innovation: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    gain_weights: &DVector<f64>,
) -> Result<Correction> {
    let n = belief.dim();
    let m = innovation.len();
    if jacobian.nrows() != m || jacobian.ncols() != n {
        return Err(Error::Dimension {
            context: "observation Jacobian",
            expected: m * n,
            actual: jacobian.nrows() * jacobian.ncols(),
        });
    }
    if noise.nrows() != m || gain_weights.len() != m {
        return Err(Error::Dimension {
            context: "measurement noise",
            expected: m,
            actual: noise.nrows(),
        });
    }

    let p_inv =
        linalg::spd_inverse(&belief.covariance).ok_or(Error::Singular("prior covariance"))?;
    let r_inv = linalg::spd_inverse(noise).ok_or(Error::Singular("measurement noise"))?;

    // C R̂⁻¹: scale row j by c_j
    let mut c_r_inv = r_inv.matrix;
    for (j, mut row) in c_r_inv.row_iter_mut().enumerate() {
        row *= gain_weights[j];
    }
    let ht_c_r_inv = jacobian.transpose() * &c_r_inv;
    let information = &p_inv.matrix + &ht_c_r_inv * jacobian;
    let inv = invert_gain_matrix(&information)?;
    let gain = inv.matrix * ht_c_r_inv;

    let mean = &belief.mean + &gain * innovation;
    let i_kh = DMatrix::identity(n, n) - &gain * jacobian;
    let covariance = symmetrize(
        &(&i_kh * &belief.covariance * i_kh.transpose() + &gain * noise * gain.transpose()),
    );

    Ok(Correction {
        belief: GaussianBelief {
            mean,
            covariance,
            time: belief.time,
        },
        gain,
        regularized: p_inv.regularized || inv.regularized,
    })
}

fn check_measurement(sensor: &SensorId, z: &DVector<f64>) -> Result<()> {
    match linalg::all_finite(z) {
        Some(index) => Err(Error::NonFiniteMeasurement {
            sensor: sensor.0.clone(),
            index,
        }),
        None => Ok(()),
    }
}

fn update_with<M: MeasurementFunction>(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    model: &MeasurementModel<M>,
    weights: impl FnOnce(&DVector<f64>) -> CorrentropyWeights,
) -> Result<(GaussianBelief, InnovationRecord)> {
    check_measurement(&model.sensor, z)?;
    let predicted_z = model.function.observe(&belief.mean);
    if predicted_z.len() != z.len() {
        return Err(Error::Dimension {
            context: "measurement",
            expected: predicted_z.len(),
            actual: z.len(),
        });
    }
    let innovation = z - predicted_z;
    let jacobian = model.function.jacobian(&belief.mean);
    let weights = weights(&innovation);
    let correction = correct(
        belief,
        &innovation,
        &jacobian,
        &model.noise,
        &weights.weighted,
    )?;
    let residual = z - model.function.observe(&correction.belief.mean);

    let record = InnovationRecord {
        time: belief.time,
        sensor: model.sensor.clone(),
        innovation,
        residual,
        observation_jacobian: jacobian,
        predicted_mean: belief.mean.clone(),
        predicted_covariance: belief.covariance.clone(),
        posterior_mean: correction.belief.mean.clone(),
        posterior_covariance: correction.belief.covariance.clone(),
        gain: correction.gain,
        noise: model.noise.clone(),
        weights,
        regularized: correction.regularized,
    };
    if record.regularized {
        log::debug!("sensor {}: MCC gain inversion needed a ridge", model.sensor);
    }
    Ok((correction.belief, record))
}

/// Maximum correntropy criterion correction.
pub fn mcckf_update<M: MeasurementFunction>(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    model: &MeasurementModel<M>,
) -> Result<(GaussianBelief, InnovationRecord)> {
    update_with(belief, z, model, |y| {
        correntropy_weights(y, &model.noise, &model.bandwidth)
    })
}

/// Standard KF/EKF correction: [`mcckf_update`] with every weight forced to one.
pub fn kf_update<M: MeasurementFunction>(
    belief: &GaussianBelief,
    z: &DVector<f64>,
    model: &MeasurementModel<M>,
) -> Result<(GaussianBelief, InnovationRecord)> {
    update_with(belief, z, model, |y| CorrentropyWeights::unit(y.len()))
}
