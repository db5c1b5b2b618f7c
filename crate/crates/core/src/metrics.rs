//! Accuracy, consistency and timing metrics of a fusion run.
//!
//! Every per-step series has one entry per odometry correction, so index `i`
//! of `time`, `r_trace`, `kb_inverse`, `three_sigma` and `error` all refer to
//! the same correction.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::eskf::{state_error, CorrectionReport, FusionEngine, NominalState, ERROR_DIM};
use crate::linalg::spd_solve;
use crate::sim::Trajectory;

/// Ground-truth states sorted by time, looked up by nearest timestamp.
#[derive(Debug, Clone, Default)]
pub struct TruthTable {
    states: Vec<NominalState>,
}

/// Largest gap between a correction and the truth sample matched to it.
pub const TRUTH_TOLERANCE: f64 = 1e-3;

impl TruthTable {
    pub fn new(mut states: Vec<NominalState>) -> Self {
        states.sort_by(|a, b| a.time.total_cmp(&b.time));
        TruthTable { states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn first(&self) -> Option<&NominalState> {
        self.states.first()
    }

    pub fn at(&self, t: f64) -> Option<&NominalState> {
        let i = self.states.partition_point(|s| s.time < t);
        let candidates = [i.checked_sub(1), Some(i)];
        candidates
            .into_iter()
            .flatten()
            .filter_map(|j| self.states.get(j))
            .filter(|s| (s.time - t).abs() <= TRUTH_TOLERANCE)
            .min_by(|a, b| (a.time - t).abs().total_cmp(&(b.time - t).abs()))
    }
}

impl From<&Trajectory> for TruthTable {
    fn from(t: &Trajectory) -> Self {
        TruthTable::new(t.states().cloned().collect())
    }
}

/// Root-mean-square error per axis and of the 3-vector norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub axis: [f64; 3],
    pub total: f64,
}

impl Rmse {
    fn from_sums(sum: &[f64; 3], n: usize) -> Self {
        let n = n as f64;
        Rmse {
            axis: sum.map(|s| (s / n).sqrt()),
            total: (sum.iter().sum::<f64>() / n).sqrt(),
        }
    }
}

/// Flat metrics document written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub filter: String,
    pub source: String,
    pub seed: u64,
    /// Odometry corrections; the length of every per-step series.
    pub steps: usize,
    /// Events consumed, IMU included.
    pub events: usize,
    pub dropped: usize,
    pub rejected: usize,
    pub sensors: Vec<String>,
    pub time: Vec<f64>,
    pub step_sensor: Vec<String>,
    /// Metres.
    pub rmse_position: Option<Rmse>,
    /// Metres per second.
    pub rmse_velocity: Option<Rmse>,
    /// Radians.
    pub rmse_attitude: Option<Rmse>,
    pub nees_mean: Option<f64>,
    /// `trace(R̂)` of every sensor after each correction, in `sensors` order.
    pub r_trace: Vec<Vec<f64>>,
    /// `1/σ̂` of the correcting sensor per measurement dimension (zero for
    /// filters without a kernel).
    pub kb_inverse: Vec<Vec<f64>>,
    /// Three standard deviations of the error state, in `(p, v, θ)` order.
    pub three_sigma: Vec<Vec<f64>>,
    /// Truth minus estimate in `(p, v, θ)` order, when truth is available.
    pub error: Option<Vec<Vec<f64>>>,
}

/// Builds a [`MetricsReport`] one correction at a time.
#[derive(Debug, Clone)]
pub struct MetricsRecorder {
    report: MetricsReport,
    sq: [[f64; 3]; 3],
    nees_sum: f64,
    matched: usize,
    nees_count: usize,
}

impl MetricsRecorder {
    pub fn new(
        filter: &str,
        source: &str,
        seed: u64,
        sensors: Vec<String>,
        with_truth: bool,
    ) -> Self {
        MetricsRecorder {
            report: MetricsReport {
                filter: filter.to_owned(),
                source: source.to_owned(),
                seed,
                steps: 0,
                events: 0,
                dropped: 0,
                rejected: 0,
                sensors,
                time: Vec::new(),
                step_sensor: Vec::new(),
                rmse_position: None,
                rmse_velocity: None,
                rmse_attitude: None,
                nees_mean: None,
                r_trace: Vec::new(),
                kb_inverse: Vec::new(),
                three_sigma: Vec::new(),
                error: with_truth.then(Vec::new),
            },
            sq: [[0.0; 3]; 3],
            nees_sum: 0.0,
            matched: 0,
            nees_count: 0,
        }
    }

    pub fn record(
        &mut self,
        c: &CorrectionReport,
        engine: &FusionEngine,
        truth: Option<&NominalState>,
    ) {
        let r = &mut self.report;
        r.steps += 1;
        r.time.push(c.time);
        r.step_sensor.push(c.sensor.to_string());
        r.r_trace.push(
            r.sensors
                .iter()
                .map(|s| {
                    engine
                        .measurement_noise(&s.as_str().into())
                        .map_or(f64::NAN, |m| m.trace())
                })
                .collect(),
        );
        let kernel = engine.config().variant.uses_kernel();
        r.kb_inverse.push(
            c.bandwidth
                .iter()
                .map(|s| if kernel { 1.0 / s } else { 0.0 })
                .collect(),
        );
        let p = engine.covariance();
        r.three_sigma.push(
            p.diagonal()
                .iter()
                .map(|v| 3.0 * v.max(0.0).sqrt())
                .collect(),
        );

        if let Some(errors) = r.error.as_mut() {
            match truth {
                Some(t) => {
                    let e = state_error(t, engine.nominal());
                    for block in 0..3 {
                        for axis in 0..3 {
                            self.sq[block][axis] += e[3 * block + axis].powi(2);
                        }
                    }
                    self.matched += 1;
                    if let Some(n) = nees(&e, p) {
                        self.nees_sum += n;
                        self.nees_count += 1;
                    }
                    errors.push(e.iter().copied().collect());
                }
                None => errors.push(vec![f64::NAN; ERROR_DIM]),
            }
        }
    }

    pub fn finish(mut self, events: usize, dropped: usize, rejected: usize) -> MetricsReport {
        let r = &mut self.report;
        r.events = events;
        r.dropped = dropped;
        r.rejected = rejected;
        if self.matched > 0 {
            r.rmse_position = Some(Rmse::from_sums(&self.sq[0], self.matched));
            r.rmse_velocity = Some(Rmse::from_sums(&self.sq[1], self.matched));
            r.rmse_attitude = Some(Rmse::from_sums(&self.sq[2], self.matched));
        }
        if self.nees_count > 0 {
            r.nees_mean = Some(self.nees_sum / self.nees_count as f64);
        }
        self.report
    }
}

/// `eᵀ P⁻¹ e` on the error state.
pub fn nees(error: &DVector<f64>, covariance: &nalgebra::DMatrix<f64>) -> Option<f64> {
    spd_solve(covariance, error).map(|x| error.dot(&x))
}

/// Wall-time statistics of a set of per-step durations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean_ns: f64,
    pub min_ns: f64,
    pub max_ns: f64,
    pub std_ns: f64,
}

impl TimingStats {
    pub fn from_samples(ns: &[u64]) -> Self {
        if ns.is_empty() {
            return TimingStats {
                count: 0,
                mean_ns: 0.0,
                min_ns: 0.0,
                max_ns: 0.0,
                std_ns: 0.0,
            };
        }
        let n = ns.len() as f64;
        let mean = ns.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = ns.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        TimingStats {
            count: ns.len(),
            mean_ns: mean,
            min_ns: *ns.iter().min().unwrap() as f64,
            max_ns: *ns.iter().max().unwrap() as f64,
            std_ns: var.sqrt(),
        }
    }
}

/// Per-filter timing, kept apart from [`MetricsReport`] so that metrics stay
/// bitwise reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub filter: String,
    pub window: usize,
    /// Every `fuse_step` call.
    pub step: TimingStats,
    /// Steps that ended in a correction.
    pub correction: TimingStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    }
}
