//! Experiment runner: resolve a stream, run one or more filters over it and
//! write estimates, metrics and timing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Source};
use crate::dataset::{read_stream_file, read_truth_file, sensor_ids};
use crate::eskf::{
    canonical_quaternion, FilterVariant, FusionConfig, FusionEngine, NominalState, SensorEvent,
    StepOutcome, ERROR_DIM,
};
use crate::metrics::{MetricsRecorder, MetricsReport, TimingReport, TimingStats, TruthTable};
use crate::sim::simulate;
use crate::{Error, Result, SensorId};

pub const ESTIMATE_HEADER: [&str; 21] = [
    "time_s",
    "sensor_id",
    "px",
    "py",
    "pz",
    "qw",
    "qx",
    "qy",
    "qz",
    "vx",
    "vy",
    "vz",
    "sd_px",
    "sd_py",
    "sd_pz",
    "sd_vx",
    "sd_vy",
    "sd_vz",
    "sd_rx",
    "sd_ry",
    "sd_rz",
];

/// A resolved event stream with everything needed to start a filter on it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub label: String,
    pub events: Vec<SensorEvent>,
    pub truth: Option<TruthTable>,
    pub sensors: Vec<SensorId>,
    pub process_noise: DMatrix<f64>,
    pub initial: NominalState,
}

/// Resolve the scenario or dataset named by `cfg`.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    if let Some(spec) = cfg.scenario()? {
        let (truth, events) = simulate(&spec)?;
        let initial = truth.samples[0].state.clone();
        return Ok(Prepared {
            label: format!("scenario:{}", source_name(&cfg.source)),
            sensors: spec.sensors.iter().map(|s| s.id.clone()).collect(),
            process_noise: spec.process_noise(),
            truth: Some(TruthTable::from(&truth)),
            initial,
            events,
        });
    }
    let Source::Dataset { stream, truth } = &cfg.source else {
        unreachable!("scenario handled above");
    };
    let events = read_stream_file(stream, &cfg.sensors).map_err(|e| with_path(e, stream))?;
    let truth = match truth {
        Some(p) => Some(TruthTable::new(
            read_truth_file(p).map_err(|e| with_path(e, p))?,
        )),
        None => None,
    };
    let sensors = if cfg.sensors.is_empty() {
        sensor_ids(&events)
    } else {
        cfg.sensors.clone()
    };
    if sensors.is_empty() {
        return Err(Error::dataset(0, "dataset contains no odometry rows"));
    }
    let initial = initial_state(&events, truth.as_ref())?;
    Ok(Prepared {
        label: format!("dataset:{}", stream.display()),
        events,
        truth,
        sensors,
        process_noise: DMatrix::identity(ERROR_DIM, ERROR_DIM) * 1e-6,
        initial,
    })
}

fn source_name(s: &Source) -> String {
    match s {
        Source::Scenario(n) => n.clone(),
        Source::Dataset { stream, .. } => stream.display().to_string(),
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

/// Truth at the first event when available, otherwise the first odometry pose.
fn initial_state(events: &[SensorEvent], truth: Option<&TruthTable>) -> Result<NominalState> {
    let t0 = events.first().map_or(0.0, SensorEvent::time);
    if let Some(x) = truth.and_then(|t| t.at(t0).or(t.first())) {
        return Ok(NominalState {
            time: t0,
            ..x.clone()
        });
    }
    events
        .iter()
        .find_map(|e| match e {
            SensorEvent::Odometry(o) => Some(NominalState {
                position: o.position,
                velocity: o.velocity,
                orientation: o.orientation,
                time: t0,
            }),
            SensorEvent::Imu(_) => None,
        })
        .ok_or_else(|| Error::dataset(0, "dataset contains no odometry rows"))
}

/// One row of the estimates file.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub time: f64,
    pub sensor: SensorId,
    pub state: NominalState,
    pub std: [f64; ERROR_DIM],
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub timing: TimingReport,
    pub estimates: Vec<Estimate>,
}

/// Run one filter over a prepared stream.
pub fn run_filter(config: FusionConfig, prepared: &Prepared, seed: u64) -> Result<RunOutput> {
    let variant = config.variant;
    let window = config.window;
    let mut engine = FusionEngine::new(config, prepared.initial.clone())?;
    let names: Vec<String> = prepared.sensors.iter().map(|s| s.to_string()).collect();
    let mut recorder = MetricsRecorder::new(
        variant.as_str(),
        &prepared.label,
        seed,
        names,
        prepared.truth.is_some(),
    );
    let mut estimates = Vec::new();
    let mut step_ns = Vec::with_capacity(prepared.events.len());
    let mut correction_ns = Vec::new();
    let mut rejected = 0;

    for event in &prepared.events {
        let start = Instant::now();
        let outcome = engine.fuse_step(event);
        let ns = start.elapsed().as_nanos() as u64;
        step_ns.push(ns);
        match outcome {
            Ok(StepOutcome::Corrected(report)) => {
                correction_ns.push(ns);
                let truth = prepared.truth.as_ref().and_then(|t| t.at(report.time));
                recorder.record(&report, &engine, truth);
                let p = engine.covariance();
                let mut std = [0.0; ERROR_DIM];
                for (i, s) in std.iter_mut().enumerate() {
                    *s = p[(i, i)].max(0.0).sqrt();
                }
                estimates.push(Estimate {
                    time: report.time,
                    sensor: report.sensor.clone(),
                    state: engine.nominal().clone(),
                    std,
                });
            }
            Ok(_) => {}
            Err(Error::OutOfOrder { time, latest }) => {
                log::warn!("dropping event at t={time}, already at t={latest}");
            }
            Err(
                e @ (Error::InvalidMeasurement { .. }
                | Error::NonFiniteMeasurement { .. }
                | Error::NonFiniteImu { .. }
                | Error::UnknownSensor(_)),
            ) => {
                log::warn!("skipping event: {e}");
                rejected += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let metrics = recorder.finish(prepared.events.len(), engine.dropped(), rejected);
    Ok(RunOutput {
        metrics,
        timing: TimingReport {
            filter: variant.as_str().to_owned(),
            window,
            step: TimingStats::from_samples(&step_ns),
            correction: TimingStats::from_samples(&correction_ns),
        },
        estimates,
    })
}

/// Resolve, run and write `estimates`, `metrics` and `timing` under `cfg.out`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    let fusion = cfg.fusion_config(&prepared.sensors, &prepared.process_noise)?;
    let out = run_filter(fusion, &prepared, cfg.seed)?;
    write_outputs(&cfg.out, cfg, &out)?;
    Ok(out)
}

pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_estimates(&dir.join(&cfg.estimates_file), &out.estimates)?;
    write_json(&dir.join(&cfg.metrics_file), &out.metrics)?;
    write_json(&dir.join(&cfg.timing_file), &out.timing)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_estimates(path: &Path, rows: &[Estimate]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", ESTIMATE_HEADER.join(","))?;
    for r in rows {
        let q = canonical_quaternion(&r.state.orientation);
        let quat = [q.w, q.i, q.j, q.k];
        let mut fields = vec![r.time.to_string(), r.sensor.to_string()];
        let numbers = r
            .state
            .position
            .iter()
            .chain(quat.iter())
            .chain(r.state.velocity.iter())
            .chain(r.std.iter());
        fields.extend(numbers.map(f64::to_string));
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Headline numbers of one filter in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub filter: String,
    pub rmse_position: Option<f64>,
    pub rmse_velocity: Option<f64>,
    pub rmse_attitude: Option<f64>,
    pub nees_mean: Option<f64>,
    pub steps: usize,
    pub mean_step_ns: f64,
}

impl Summary {
    pub fn of(out: &RunOutput) -> Self {
        let m = &out.metrics;
        Summary {
            filter: m.filter.clone(),
            rmse_position: m.rmse_position.map(|r| r.total),
            rmse_velocity: m.rmse_velocity.map(|r| r.total),
            rmse_attitude: m.rmse_attitude.map(|r| r.total),
            nees_mean: m.nees_mean,
            steps: m.steps,
            mean_step_ns: out.timing.step.mean_ns,
        }
    }
}

/// Run several filters on one stream, each on its own thread. Results keep
/// the order of `variants`.
pub fn compare(cfg: &RunConfig, variants: &[FilterVariant]) -> Result<Vec<RunOutput>> {
    let prepared = prepare(cfg)?;
    let configs: Vec<FusionConfig> = variants
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.filter = v;
            c.fusion_config(&prepared.sensors, &prepared.process_noise)
        })
        .collect::<Result<_>>()?;
    std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .into_iter()
            .map(|c| {
                let p = &prepared;
                s.spawn(move || run_filter(c, p, cfg.seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("filter thread panicked"))
            .collect()
    })
}

/// Write each comparison run under `dir/<filter>/` and a `compare.json`
/// summary; returns the summary path.
pub fn write_comparison(dir: &Path, cfg: &RunConfig, runs: &[RunOutput]) -> Result<PathBuf> {
    for r in runs {
        write_outputs(&dir.join(&r.metrics.filter), cfg, r)?;
    }
    let path = dir.join("compare.json");
    let summaries: Vec<Summary> = runs.iter().map(Summary::of).collect();
    write_json(&path, &summaries)?;
    Ok(path)
}

/// One row of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub filter: String,
    pub window: usize,
    pub repeats: usize,
    /// Mean per-step wall time of each repeat.
    pub run_mean_ns: Vec<f64>,
    /// Statistics over all steps of all repeats.
    pub step: TimingStats,
    pub correction: TimingStats,
}

/// Time every configuration `repeats` times on its own stream, sequentially
/// so that runs do not compete for cores.
pub fn bench(configs: &[RunConfig], repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::config("repeats", "must be at least 1"));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let prepared = prepare(cfg)?;
        let fusion = cfg.fusion_config(&prepared.sensors, &prepared.process_noise)?;
        let mut run_mean_ns = Vec::with_capacity(repeats);
        let mut step = Vec::new();
        let mut correction = Vec::new();
        for _ in 0..repeats {
            let out = run_filter(fusion.clone(), &prepared, cfg.seed)?;
            run_mean_ns.push(out.timing.step.mean_ns);
            step.push(out.timing.step);
            correction.push(out.timing.correction);
        }
        rows.push(BenchRow {
            filter: cfg.filter.as_str().to_owned(),
            window: cfg.window,
            repeats,
            run_mean_ns,
            step: pooled(&step),
            correction: pooled(&correction),
        });
    }
    Ok(rows)
}

/// Combine equal-weight-per-sample statistics of several runs.
fn pooled(parts: &[TimingStats]) -> TimingStats {
    let count: usize = parts.iter().map(|p| p.count).sum();
    if count == 0 {
        return TimingStats::from_samples(&[]);
    }
    let n = count as f64;
    let mean = parts
        .iter()
        .map(|p| p.mean_ns * p.count as f64)
        .sum::<f64>()
        / n;
    let second = parts
        .iter()
        .map(|p| (p.std_ns.powi(2) + p.mean_ns.powi(2)) * p.count as f64)
        .sum::<f64>()
        / n;
    TimingStats {
        count,
        mean_ns: mean,
        min_ns: parts.iter().map(|p| p.min_ns).fold(f64::INFINITY, f64::min),
        max_ns: parts.iter().map(|p| p.max_ns).fold(0.0, f64::max),
        std_ns: (second - mean * mean).max(0.0).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(filter: &str) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.set("filter", filter).unwrap();
        cfg.set("duration", "2").unwrap();
        cfg
    }

    #[test]
    fn series_lengths_match_step_count() {
        let prepared = prepare(&short("vb-amcckf")).unwrap();
        let cfg = short("vb-amcckf");
        let out = run_filter(
            cfg.fusion_config(&prepared.sensors, &prepared.process_noise)
                .unwrap(),
            &prepared,
            0,
        )
        .unwrap();
        let m = &out.metrics;
        assert!(m.steps > 0);
        for len in [
            m.time.len(),
            m.step_sensor.len(),
            m.r_trace.len(),
            m.kb_inverse.len(),
            m.three_sigma.len(),
            m.error.as_ref().unwrap().len(),
            out.estimates.len(),
        ] {
            assert_eq!(len, m.steps);
        }
        assert_eq!(out.timing.correction.count, m.steps);
        assert_eq!(out.timing.step.count, prepared.events.len());
        assert!(m.rmse_position.unwrap().total >= 0.0);
    }

    #[test]
    fn kernel_free_filters_report_zero_kb_inverse() {
        let cfg = short("ekf");
        let prepared = prepare(&cfg).unwrap();
        let out = run_filter(
            cfg.fusion_config(&prepared.sensors, &prepared.process_noise)
                .unwrap(),
            &prepared,
            0,
        )
        .unwrap();
        assert!(out.metrics.kb_inverse.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn pooled_matches_direct_statistics() {
        let a = [1u64, 5, 9];
        let b = [2u64, 2];
        let all = [1u64, 5, 9, 2, 2];
        let p = pooled(&[TimingStats::from_samples(&a), TimingStats::from_samples(&b)]);
        let d = TimingStats::from_samples(&all);
        assert_eq!(p.count, d.count);
        assert!((p.mean_ns - d.mean_ns).abs() < 1e-12);
        assert!((p.std_ns - d.std_ns).abs() < 1e-9);
        assert_eq!(p.min_ns, d.min_ns);
        assert_eq!(p.max_ns, d.max_ns);
    }

    #[test]
    fn bench_needs_a_repeat() {
        assert!(bench(&[short("ekf")], 0).unwrap_err().is_validation());
    }
}
