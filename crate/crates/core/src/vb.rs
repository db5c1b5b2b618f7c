//! Variational Bayesian noise adaptation over a sliding window.
//!
//! Each correction pushes a [`WindowSnapshot`]. A Rauch–Tung–Striebel pass
//! runs backward over the window, the smoothed moments give the process and
//! measurement sufficient statistics, and those are folded into
//! inverse-Wishart hyperparameters with exponential forgetting. `Q̂` and `R̂`
//! are the scale matrices divided by their degrees of freedom.
//!
//! The residual term of the measurement statistic is multiplied on both
//! sides by the unweighted correntropy gain `L`, so a measurement rejected by
//! the kernel does not inflate `R̂` either.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::filter::WindowSnapshot;
use crate::linalg::{self, symmetrize};
use crate::{Error, Result, SensorId};

/// Degrees of freedom plus inverse scale matrix of an inverse-Wishart
/// posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseWishart {
    pub dof: f64,
    pub scale: DMatrix<f64>,
}

impl InverseWishart {
    /// `dof = 0`, `scale = 0`.
    pub fn empty(dim: usize) -> Self {
        InverseWishart {
            dof: 0.0,
            scale: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    /// `dof ← ρ·dof + count`, `scale ← ρ·scale + sum`.
    pub fn absorb(&mut self, sum: &DMatrix<f64>, count: f64, forgetting: f64) {
        self.dof = forgetting * self.dof + count;
        self.scale = &self.scale * forgetting + sum;
    }

    /// `scale / dof`.
    pub fn estimate(&self) -> Result<DMatrix<f64>> {
        if !(self.dof > 0.0) {
            return Err(Error::AdaptationNotReady(
                "inverse-Wishart degrees of freedom are zero",
            ));
        }
        Ok(symmetrize(&(&self.scale / self.dof)))
    }
}

/// Hyperparameters `(t, T)` for `Q̂` and `(b, B)` for one sensor's `R̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct WishartNoiseState {
    pub process: InverseWishart,
    pub measurement: InverseWishart,
}

impl WishartNoiseState {
    pub fn empty(state_dim: usize, measurement_dim: usize) -> Self {
        WishartNoiseState {
            process: InverseWishart::empty(state_dim),
            measurement: InverseWishart::empty(measurement_dim),
        }
    }
}

fn check_forgetting(forgetting: f64) -> Result<()> {
    if !(0.9..=1.0).contains(&forgetting) {
        return Err(Error::config(
            "rho",
            format!("forgetting factor must lie in [0.9, 1], got {forgetting}"),
        ));
    }
    Ok(())
}

/// One hyperparameter step with a full window of `window` terms.
pub fn wishart_update(
    state: &WishartNoiseState,
    process_sum: &DMatrix<f64>,
    measurement_sum: &DMatrix<f64>,
    forgetting: f64,
    window: usize,
) -> WishartNoiseState {
    let mut next = state.clone();
    next.process.absorb(process_sum, window as f64, forgetting);
    next.measurement
        .absorb(measurement_sum, window as f64, forgetting);
    next
}

/// `(Q̂, R̂) = (T / t, B / b)`.
pub fn extract_noise(state: &WishartNoiseState) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok((state.process.estimate()?, state.measurement.estimate()?))
}

/// Ordered snapshots of the last `window + 1` corrections.
#[derive(Debug, Clone)]
pub struct SmootherWindow {
    snapshots: VecDeque<WindowSnapshot>,
    window: usize,
    forgetting: f64,
}

impl SmootherWindow {
    pub fn new(window: usize, forgetting: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window", "window length must be at least 1"));
        }
        check_forgetting(forgetting)?;
        Ok(SmootherWindow {
            snapshots: VecDeque::with_capacity(window + 1),
            window,
            forgetting,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn forgetting(&self) -> f64 {
        self.forgetting
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &VecDeque<WindowSnapshot> {
        &self.snapshots
    }

    /// Append a snapshot, evicting the oldest once `window + 1` are held.
    /// Snapshots sharing a timestamp are accepted (two sensors correcting
    /// against the same IMU epoch); going back in time is not.
    pub fn push(&mut self, snapshot: WindowSnapshot) -> Result<()> {
        if let Some(last) = self.snapshots.back() {
            if snapshot.time() < last.time() {
                return Err(Error::OutOfOrder {
                    time: snapshot.time(),
                    latest: last.time(),
                });
            }
        }
        if self.snapshots.len() == self.window + 1 {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(snapshot);
        Ok(())
    }
}

/// Smoothed moments at one window index.
#[derive(Debug, Clone)]
pub struct SmoothedPoint {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// `G_{j−1} = P_{j−1|j−1} Fᵀ P_{j|j−1}⁻¹`; `None` at the oldest index.
    pub smoother_gain: Option<DMatrix<f64>>,
    /// `P_{j−1,j|k} = G_{j−1} P_{j|k}`; `None` at the oldest index.
    pub cross_covariance: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct SmoothedWindow {
    pub points: Vec<SmoothedPoint>,
    /// Some predicted covariance needed a ridge to invert.
    pub regularized: bool,
}

/// Rauch–Tung–Striebel backward pass over the window.
pub fn backward_smooth(window: &SmootherWindow) -> Result<SmoothedWindow> {
    let snaps = window.snapshots();
    let last = snaps
        .back()
        .ok_or(Error::AdaptationNotReady("smoother window is empty"))?;
    let n = snaps.len();
    let mut points = Vec::with_capacity(n);
    points.push(SmoothedPoint {
        mean: last.record.posterior_mean.clone(),
        covariance: last.record.posterior_covariance.clone(),
        smoother_gain: None,
        cross_covariance: None,
    });
    let mut regularized = false;

    for j in (1..n).rev() {
        let prev = &snaps[j - 1].record;
        let cur = &snaps[j];
        let f = &cur.transition;
        let p_filt = &prev.posterior_covariance;
        let p_pred = symmetrize(&(f * p_filt * f.transpose() + &cur.process_noise));
        let inv =
            linalg::spd_inverse(&p_pred).ok_or(Error::Singular("smoother prior covariance"))?;
        regularized |= inv.regularized;
        let gain = p_filt * f.transpose() * inv.matrix;

        let next = points.last_mut().expect("seeded above");
        let mean = &prev.posterior_mean + &gain * (&next.mean - &cur.record.predicted_mean);
        let covariance =
            symmetrize(&(p_filt + &gain * (&next.covariance - &p_pred) * gain.transpose()));
        next.cross_covariance = Some(&gain * &next.covariance);
        next.smoother_gain = Some(gain);

        points.push(SmoothedPoint {
            mean,
            covariance,
            smoother_gain: None,
            cross_covariance: None,
        });
    }
    points.reverse();
    if regularized {
        log::debug!("backward smoother regularized a singular predicted covariance");
    }
    Ok(SmoothedWindow {
        points,
        regularized,
    })
}

/// Process-noise statistic of a window and the number of discrete prediction
/// steps it spans.
#[derive(Debug, Clone)]
pub struct ProcessStatistic {
    pub sum: DMatrix<f64>,
    pub steps: usize,
}

/// `Σ_j P_{j|k} − F P_{j−1,j|k} − P_{j−1,j|k}ᵀ Fᵀ + F P_{j−1|k} Fᵀ + x̃ x̃ᵀ`
/// with `x̃ = (x̂_{j|k} − x̂_{j|j−1}) − F (x̂_{j−1|k} − x̂_{j−1|j−1})`, which is
/// `x̂_{j|k} − F x̂_{j−1|k}` for a linear transition without input. The sum is
/// projected onto the PSD cone.
pub fn process_statistic(window: &SmootherWindow, smoothed: &SmoothedWindow) -> ProcessStatistic {
    let snaps = window.snapshots();
    let n = snaps.len();
    let dim = snaps.front().map_or(0, |s| s.record.posterior_mean.len());
    let mut sum = DMatrix::zeros(dim, dim);
    let mut steps = 0;
    for j in 1..n {
        let f = &snaps[j].transition;
        let cur = &smoothed.points[j];
        let prev = &smoothed.points[j - 1];
        let cross = cur
            .cross_covariance
            .as_ref()
            .expect("smoother sets the cross covariance for every index but the first");
        let f_cross = f * cross;
        let x_tilde = (&cur.mean - &snaps[j].record.predicted_mean)
            - f * (&prev.mean - &snaps[j - 1].record.posterior_mean);
        sum += &cur.covariance - &f_cross - f_cross.transpose()
            + f * &prev.covariance * f.transpose()
            + &x_tilde * x_tilde.transpose();
        steps += snaps[j].steps;
    }
    ProcessStatistic {
        sum: linalg::psd_project(&sum),
        steps,
    }
}

/// Inputs of one measurement term `M_j`.
#[derive(Debug, Clone)]
pub struct MeasurementTerm {
    pub residual: DVector<f64>,
    /// Unweighted correntropy gain `L_j` (diagonal).
    pub weights: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub smoothed_covariance: DMatrix<f64>,
}

/// `Σ_j L_j r_j r_jᵀ L_j + H_j P_{j|k} H_jᵀ`.
pub fn measurement_statistic(terms: &[MeasurementTerm]) -> Option<DMatrix<f64>> {
    let first = terms.first()?;
    let m = first.residual.len();
    let mut sum = DMatrix::zeros(m, m);
    for t in terms {
        let lr = t.residual.component_mul(&t.weights);
        sum += &lr * lr.transpose() + &t.jacobian * &t.smoothed_covariance * t.jacobian.transpose();
    }
    Some(sum)
}

/// Measurement terms of one sensor's snapshots in the window. The residual
/// is taken against the smoothed state, `r_{j|k} = ỹ_j − H_j (x̂_{j|k} − x̂_{j|j−1})`.
pub fn measurement_terms(
    window: &SmootherWindow,
    smoothed: &SmoothedWindow,
    sensor: &SensorId,
) -> Vec<MeasurementTerm> {
    window
        .snapshots()
        .iter()
        .zip(&smoothed.points)
        .filter(|(s, _)| &s.record.sensor == sensor)
        .map(|(s, p)| {
            let rec = &s.record;
            let h = &rec.observation_jacobian;
            MeasurementTerm {
                residual: &rec.innovation - h * (&p.mean - &rec.predicted_mean),
                weights: rec.weights.unweighted.clone(),
                jacobian: h.clone(),
                smoothed_covariance: p.covariance.clone(),
            }
        })
        .collect()
}

/// Fresh noise estimates after one window update. `None` means the
/// corresponding posterior has no degrees of freedom yet.
#[derive(Debug, Clone)]
pub struct VbEstimate {
    pub process_noise: Option<DMatrix<f64>>,
    pub measurement_noise: Option<DMatrix<f64>>,
    pub regularized: bool,
}

/// Shared process posterior plus one measurement posterior per sensor.
#[derive(Debug, Clone)]
pub struct VbAdaptation {
    window: SmootherWindow,
    process: InverseWishart,
    measurement: BTreeMap<SensorId, InverseWishart>,
}

impl VbAdaptation {
    pub fn new(window: usize, forgetting: f64, state_dim: usize) -> Result<Self> {
        Ok(VbAdaptation {
            window: SmootherWindow::new(window, forgetting)?,
            process: InverseWishart::empty(state_dim),
            measurement: BTreeMap::new(),
        })
    }

    pub fn process_posterior(&self) -> &InverseWishart {
        &self.process
    }

    pub fn measurement_posterior(&self, sensor: &SensorId) -> Option<&InverseWishart> {
        self.measurement.get(sensor)
    }

    pub fn window(&self) -> &SmootherWindow {
        &self.window
    }

    /// Push a snapshot, smooth the window and refresh the posteriors. Only
    /// the sensor that produced the snapshot has its `R̂` posterior updated.
    pub fn observe(&mut self, snapshot: WindowSnapshot) -> Result<VbEstimate> {
        let sensor = snapshot.record.sensor.clone();
        let m = snapshot.record.innovation.len();
        self.window.push(snapshot)?;
        let rho = self.window.forgetting();
        let smoothed = backward_smooth(&self.window)?;

        let process = process_statistic(&self.window, &smoothed);
        if process.steps > 0 {
            self.process.absorb(&process.sum, process.steps as f64, rho);
        }

        let terms = measurement_terms(&self.window, &smoothed, &sensor);
        let posterior = self
            .measurement
            .entry(sensor)
            .or_insert_with(|| InverseWishart::empty(m));
        if let Some(sum) = measurement_statistic(&terms) {
            posterior.absorb(&sum, terms.len() as f64, rho);
        }

        Ok(VbEstimate {
            process_noise: self.process.estimate().ok(),
            measurement_noise: posterior.estimate().ok(),
            regularized: smoothed.regularized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{
        kf_update, predict, CorrentropyWeights, GaussianBelief, InnovationRecord,
        LinearObservation, LinearProcess, MeasurementModel, ProcessModel,
    };
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Runs a linear KF over `zs`, returning the snapshots it produced.
    fn run_kf(f: f64, q: f64, r: f64, x0: f64, p0: f64, zs: &[f64]) -> Vec<WindowSnapshot> {
        let process = LinearProcess::new(
            DMatrix::from_element(1, 1, f),
            DMatrix::from_element(1, 1, q),
        );
        let model = MeasurementModel {
            sensor: SensorId::new("z"),
            function: LinearObservation(DMatrix::identity(1, 1)),
            noise: DMatrix::from_element(1, 1, r),
            bandwidth: DVector::from_element(1, 1e6),
        };
        let mut belief = GaussianBelief::new(
            DVector::from_element(1, x0),
            DMatrix::from_element(1, 1, p0),
            0.0,
        )
        .unwrap();
        let mut out = Vec::new();
        for &z in zs {
            let prior = predict(&belief, &process, &DVector::zeros(0), 1.0).unwrap();
            let (post, record) = kf_update(&prior, &DVector::from_element(1, z), &model).unwrap();
            out.push(WindowSnapshot {
                record,
                transition: process.jacobian(&belief.mean, &DVector::zeros(0), 1.0),
                process_noise: process.noise.clone(),
                steps: 1,
            });
            belief = post;
        }
        out
    }

    fn window_of(snaps: Vec<WindowSnapshot>, len: usize) -> SmootherWindow {
        let mut w = SmootherWindow::new(len, 0.97).unwrap();
        for s in snaps {
            w.push(s).unwrap();
        }
        w
    }

    #[test]
    fn single_snapshot_smooths_to_itself() {
        let w = window_of(run_kf(1.0, 0.1, 1.0, 0.0, 1.0, &[0.4]), 10);
        let s = backward_smooth(&w).unwrap();
        assert_eq!(s.points.len(), 1);
        assert_eq!(s.points[0].mean, w.snapshots()[0].record.posterior_mean);
        assert_eq!(
            s.points[0].covariance,
            w.snapshots()[0].record.posterior_covariance
        );
    }

    #[test]
    fn static_system_smooths_to_final_estimate() {
        let w = window_of(
            run_kf(1.0, 0.0, 0.5, 0.0, 4.0, &[1.0, 0.2, 0.7, 1.3, 0.9]),
            10,
        );
        let s = backward_smooth(&w).unwrap();
        let last = s.points.last().unwrap().mean[0];
        for p in &s.points {
            assert_relative_eq!(p.mean[0], last, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_step_scalar_rts_by_hand() {
        // prior x=0, P=1 taken as the first snapshot; then F=1, Q=1, R=1, z=1
        let first = InnovationRecord {
            time: 0.0,
            sensor: SensorId::new("z"),
            innovation: DVector::zeros(1),
            residual: DVector::zeros(1),
            observation_jacobian: DMatrix::identity(1, 1),
            predicted_mean: DVector::zeros(1),
            predicted_covariance: DMatrix::from_element(1, 1, 1.0),
            posterior_mean: DVector::zeros(1),
            posterior_covariance: DMatrix::from_element(1, 1, 1.0),
            gain: DMatrix::zeros(1, 1),
            noise: DMatrix::from_element(1, 1, 1.0),
            weights: CorrentropyWeights::unit(1),
            regularized: false,
        };
        let mut snaps = vec![WindowSnapshot {
            record: first,
            transition: DMatrix::identity(1, 1),
            process_noise: DMatrix::zeros(1, 1),
            steps: 0,
        }];
        // P⁻ = 2, K = 2/3, x⁺ = 2/3, P⁺ = 2/3
        let mut second = run_kf(1.0, 1.0, 1.0, 0.0, 1.0, &[1.0]);
        second[0].record.time = 1.0;
        assert_relative_eq!(
            second[0].record.posterior_mean[0],
            2.0 / 3.0,
            epsilon = 1e-14
        );
        snaps.append(&mut second);
        let w = window_of(snaps, 10);
        let s = backward_smooth(&w).unwrap();
        // G = 1·1/2; x₀ = 0 + ½(2/3 − 0); P₀ = 1 + ¼(2/3 − 2)
        assert_relative_eq!(
            s.points[1].smoother_gain.as_ref().unwrap()[(0, 0)],
            0.5,
            epsilon = 1e-14
        );
        assert_relative_eq!(s.points[0].mean[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(s.points[0].covariance[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(
            s.points[1].cross_covariance.as_ref().unwrap()[(0, 0)],
            1.0 / 3.0,
            epsilon = 1e-14
        );

        // single O_j: P₁ − 2·cross + P₀ + x̃², x̃ = (2/3 − 0) − (1/3 − 0)
        let o = process_statistic(&w, &s);
        let expected = 2.0 / 3.0 - 2.0 / 3.0 + 2.0 / 3.0 + 1.0 / 9.0;
        assert_relative_eq!(o.sum[(0, 0)], expected, epsilon = 1e-14);
        assert_eq!(o.steps, 1);
    }

    #[test]
    fn perfect_model_has_vanishing_process_statistic() {
        let w = window_of(run_kf(1.0, 0.0, 1e-2, 2.0, 1.0, &[2.0; 8]), 10);
        let s = backward_smooth(&w).unwrap();
        let o = process_statistic(&w, &s);
        assert!(o.sum.norm() < 1e-8, "{}", o.sum);
    }

    #[test]
    fn random_walk_statistic_matches_sample_variance() {
        let q: f64 = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w_dist = Normal::new(0.0, q.sqrt()).unwrap();
        let v_dist = Normal::new(0.0, 0.1).unwrap();
        let mut x = 0.0;
        let mut ws = Vec::new();
        let mut zs = Vec::new();
        for _ in 0..10_000 {
            let w = w_dist.sample(&mut rng);
            x += w;
            ws.push(w);
            zs.push(x + v_dist.sample(&mut rng));
        }
        let snaps = run_kf(1.0, q, 0.01, 0.0, 1.0, &zs);
        let mut window = SmootherWindow::new(10, 0.97).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for s in snaps {
            window.push(s).unwrap();
            let sm = backward_smooth(&window).unwrap();
            let o = process_statistic(&window, &sm);
            if o.steps == 10 {
                total += o.sum[(0, 0)] / 10.0;
                count += 1;
            }
        }
        let mean_w = ws.iter().sum::<f64>() / ws.len() as f64;
        let var_w = ws.iter().map(|w| (w - mean_w).powi(2)).sum::<f64>() / (ws.len() - 1) as f64;
        let estimate = total / count as f64;
        assert!(
            (estimate / var_w - 1.0).abs() < 0.15,
            "{estimate} vs {var_w}"
        );
    }

    #[test]
    fn measurement_statistic_direct_arithmetic() {
        let terms: Vec<_> = [(1.0, 1.0), (2.0, 0.5), (3.0, 1.0)]
            .iter()
            .map(|&(r, l)| MeasurementTerm {
                residual: DVector::from_element(1, r),
                weights: DVector::from_element(1, l),
                jacobian: DMatrix::identity(1, 1),
                smoothed_covariance: DMatrix::from_element(1, 1, 0.1),
            })
            .collect();
        assert_relative_eq!(
            measurement_statistic(&terms).unwrap()[(0, 0)],
            11.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn unit_weights_give_unmodified_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let terms: Vec<_> = (0..5)
            .map(|_| {
                let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
                MeasurementTerm {
                    residual: DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)),
                    weights: DVector::from_element(2, 1.0),
                    jacobian: DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0)),
                    smoothed_covariance: &a * a.transpose(),
                }
            })
            .collect();
        let mut plain = DMatrix::zeros(2, 2);
        for t in &terms {
            plain += &t.residual * t.residual.transpose()
                + &t.jacobian * &t.smoothed_covariance * t.jacobian.transpose();
        }
        assert_eq!(measurement_statistic(&terms).unwrap(), plain);
    }

    #[test]
    fn annihilated_outlier_leaves_only_projected_covariance() {
        let sigma = DVector::from_element(1, 1.0);
        let noise = DMatrix::from_element(1, 1, 1.0);
        let make = |r: f64| {
            let w =
                crate::filter::correntropy_weights(&DVector::from_element(1, r), &noise, &sigma);
            MeasurementTerm {
                residual: DVector::from_element(1, r),
                weights: w.unweighted,
                jacobian: DMatrix::identity(1, 1),
                smoothed_covariance: DMatrix::from_element(1, 1, 0.2),
            }
        };
        let base = vec![make(0.3), make(-0.5)];
        let mut with_outlier = base.clone();
        with_outlier.push(make(1e6));
        let mut with_nothing = base.clone();
        with_nothing.push(make(0.0));
        let diff = (measurement_statistic(&with_outlier).unwrap()
            - measurement_statistic(&with_nothing).unwrap())[(0, 0)]
            .abs();
        assert!(diff < 0.2, "{diff}");
    }

    #[test]
    fn dof_first_step_and_fixed_point() {
        let mut state = WishartNoiseState::empty(1, 1);
        let zero = DMatrix::zeros(1, 1);
        state = wishart_update(&state, &zero, &zero, 0.97, 10);
        assert_eq!(state.process.dof, 10.0);
        for _ in 0..2000 {
            state = wishart_update(&state, &zero, &zero, 0.97, 10);
        }
        assert_relative_eq!(state.process.dof, 10.0 / 0.03, epsilon = 1e-9);
        assert_relative_eq!(state.measurement.dof, 333.333_333_333, epsilon = 1e-6);
    }

    #[test]
    fn no_forgetting_grows_linearly() {
        let mut state = WishartNoiseState::empty(2, 2);
        let zero = DMatrix::zeros(2, 2);
        for k in 1..=50 {
            state = wishart_update(&state, &zero, &zero, 1.0, 7);
            assert_eq!(state.process.dof, 7.0 * k as f64);
        }
    }

    #[test]
    fn scale_converges_to_geometric_limit() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut state = WishartNoiseState::empty(2, 2);
        for _ in 0..3000 {
            state = wishart_update(&state, &s, &s, 0.95, 5);
        }
        let limit = &s / 0.05;
        assert!((&state.process.scale - &limit).amax() < 1e-9);
    }

    #[test]
    fn extraction_divides_by_dof() {
        let state = WishartNoiseState {
            process: InverseWishart {
                dof: 1.0,
                scale: DMatrix::identity(9, 9),
            },
            measurement: InverseWishart {
                dof: 2.0,
                scale: DMatrix::identity(9, 9) * 4.0,
            },
        };
        let (_, r) = extract_noise(&state).unwrap();
        assert_eq!(r, DMatrix::identity(9, 9) * 2.0);
    }

    #[test]
    fn empty_posterior_is_not_ready() {
        let state = WishartNoiseState::empty(9, 9);
        assert!(matches!(
            extract_noise(&state),
            Err(Error::AdaptationNotReady(_))
        ));
    }

    #[test]
    fn window_evicts_and_rejects_time_reversal() {
        let snaps = run_kf(1.0, 0.1, 1.0, 0.0, 1.0, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        let mut times = snaps.clone();
        for (i, s) in times.iter_mut().enumerate() {
            s.record.time = i as f64;
        }
        let mut w = SmootherWindow::new(2, 0.97).unwrap();
        for s in times.iter().cloned() {
            w.push(s).unwrap();
        }
        assert_eq!(w.len(), 3);
        assert!(w.push(times[0].clone()).is_err());
        assert!(SmootherWindow::new(0, 0.97).is_err());
        assert!(SmootherWindow::new(5, 0.5).is_err());
    }

    fn psd(dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(dim, dim + 1, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    proptest! {
        #[test]
        fn extracted_noise_is_symmetric_psd(seed in any::<u64>(), dim in 1usize..9, steps in 1usize..30, rho in 0.9f64..=1.0) {
            let mut state = WishartNoiseState::empty(dim, dim);
            for k in 0..steps {
                state = wishart_update(&state, &psd(dim, seed ^ k as u64), &psd(dim, seed.wrapping_add(k as u64)), rho, 10);
            }
            let (q, r) = extract_noise(&state).unwrap();
            for m in [q, r] {
                prop_assert!(linalg::asymmetry(&m) < 1e-12);
                prop_assert!(linalg::min_eigenvalue(&m) >= -1e-9);
            }
        }

        #[test]
        fn dof_converges_monotonically(t0 in 0.0f64..2000.0, rho in 0.9f64..0.999, window in 1usize..30) {
            let limit = window as f64 / (1.0 - rho);
            let mut state = WishartNoiseState::empty(1, 1);
            state.process.dof = t0;
            let zero = DMatrix::zeros(1, 1);
            let mut gap = (t0 - limit).abs();
            for _ in 0..200 {
                state = wishart_update(&state, &zero, &zero, rho, window);
                let next_gap = (state.process.dof - limit).abs();
                prop_assert!(next_gap <= gap + 1e-9 * limit);
                gap = next_gap;
            }
        }
    }
}
