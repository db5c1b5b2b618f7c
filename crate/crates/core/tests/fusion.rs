use amcckf::eskf::{
    attitude_error, AdaptationScheme, FilterVariant, FusionConfig, FusionEngine, NominalState,
    SensorEvent, StepOutcome, ERROR_DIM,
};
use amcckf::sim::{simulate, ImuNoise, NoiseSpec, ScenarioSpec, Trajectory, TrajectoryKind};
use amcckf::SensorId;
use nalgebra::{DMatrix, UnitQuaternion, Vector3};

fn figure_eight() -> TrajectoryKind {
    TrajectoryKind::FigureEight {
        center: Vector3::new(0.0, 0.0, 1.5),
        radius: 2.0,
        period: 20.0,
    }
}

fn hover() -> TrajectoryKind {
    TrajectoryKind::Hover {
        position: Vector3::new(0.0, 0.0, 1.5),
        yaw: 0.3,
    }
}

fn noise_free(kind: TrajectoryKind, duration: f64) -> ScenarioSpec {
    let mut spec = ScenarioSpec::two_sensor(kind, duration);
    spec.imu_noise = ImuNoise {
        accel_std: 0.0,
        gyro_std: 0.0,
    };
    for s in &mut spec.sensors {
        s.noise = NoiseSpec::gaussian(0.0, 0.0, 0.0);
    }
    spec
}

fn config(variant: FilterVariant, spec: &ScenarioSpec) -> FusionConfig {
    let ids: Vec<&str> = spec.sensors.iter().map(|s| s.id.as_str()).collect();
    FusionConfig::new(variant, &ids)
}

/// Run the stream and return the estimated position error after every
/// correction.
fn run(
    cfg: FusionConfig,
    initial: NominalState,
    events: &[SensorEvent],
    truth: &Trajectory,
    mut each: impl FnMut(&FusionEngine, &amcckf::eskf::CorrectionReport),
) -> (FusionEngine, Vec<f64>) {
    let mut engine = FusionEngine::new(cfg, initial).unwrap();
    let mut errors = Vec::new();
    for e in events {
        if let StepOutcome::Corrected(report) = engine.fuse_step(e).unwrap() {
            let t = truth.at(report.time).unwrap();
            errors.push((engine.nominal().position - t.state.position).norm());
            each(&engine, &report);
        }
    }
    (engine, errors)
}

fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

#[test]
fn noise_free_stream_reproduces_truth_for_every_variant() {
    let spec = noise_free(figure_eight(), 60.0);
    let (truth, events) = simulate(&spec).unwrap();
    let initial = truth.samples[0].state.clone();
    for variant in FilterVariant::ALL {
        for scheme in [
            AdaptationScheme::VariationalBayes,
            AdaptationScheme::Residual,
        ] {
            let mut cfg = config(variant, &spec);
            cfg.akf_scheme = scheme;
            let (engine, errors) = run(cfg, initial.clone(), &events, &truth, |_, _| {});
            let worst = errors.iter().cloned().fold(0.0, f64::max);
            assert!(worst < 1e-2, "{variant} {scheme:?}: max error {worst}");
            assert!(engine.covariance().iter().all(|x| x.is_finite()));
            let (dq, _) = attitude_error(
                &engine.nominal().orientation,
                &truth.samples.last().unwrap().state.orientation,
            );
            assert!(dq.norm() < 1e-3, "{variant}: attitude {}", dq.norm());
        }
    }
}

#[test]
fn stationary_position_error_stays_bounded() {
    // 50 s at 200 Hz is 10^4 propagation steps
    let spec = ScenarioSpec::two_sensor(hover(), 50.0).with_seed(7);
    let (truth, events) = simulate(&spec).unwrap();
    for variant in FilterVariant::ALL {
        let mut cfg = config(variant, &spec);
        cfg.process_noise = spec.process_noise();
        let (engine, errors) = run(
            cfg,
            truth.samples[0].state.clone(),
            &events,
            &truth,
            |_, _| {},
        );
        assert!(engine.steps() >= 10_000, "{}", engine.steps());
        let head = rmse(&errors[..errors.len() / 2]);
        let tail = rmse(&errors[errors.len() / 2..]);
        assert!(tail < 0.1, "{variant}: tail rmse {tail}");
        assert!(tail < 3.0 * head.max(0.01), "{variant}: {head} -> {tail}");
    }
}

#[test]
fn sensor_with_constant_jumps_inflates_only_its_own_noise() {
    let spec = ScenarioSpec::two_sensor(hover(), 30.0).with_seed(3);
    let (truth, mut events) = simulate(&spec).unwrap();
    let bad = SensorId::new("vio1");
    let onset = 10.0;
    for e in &mut events {
        if let SensorEvent::Odometry(z) = e {
            if z.sensor == bad && z.time >= onset {
                z.position.x += 5.0;
            }
        }
    }
    for variant in [FilterVariant::RAmcckf, FilterVariant::VbAmcckf] {
        let mut before = [0.0; 2];
        let mut after_bad = 0.0_f64;
        let mut healthy = (f64::INFINITY, 0.0_f64);
        let (_, errors) = run(
            config(variant, &spec),
            truth.samples[0].state.clone(),
            &events,
            &truth,
            |_, r| {
                let i = usize::from(r.sensor == bad);
                let trace = r.noise.trace();
                if r.time < onset {
                    before[i] = trace;
                } else if i == 1 {
                    after_bad = after_bad.max(trace);
                } else {
                    healthy = (healthy.0.min(trace), healthy.1.max(trace));
                }
            },
        );
        // the kernel suppresses most of a 100-sigma jump, so growth is modest
        assert!(
            after_bad >= 2.0 * before[1],
            "{variant}: {} -> {after_bad}",
            before[1]
        );
        assert!(
            healthy.0 >= 0.5 * before[0] && healthy.1 <= 2.0 * before[0],
            "{variant}: healthy {} in {healthy:?}",
            before[0]
        );
        let tail = rmse(&errors[errors.len() / 2..]);
        assert!(
            tail < 0.5,
            "{variant}: filter followed the jumping sensor, {tail}"
        );
    }
}

fn rotate_event(e: &SensorEvent, r: &UnitQuaternion<f64>) -> SensorEvent {
    match e {
        // body-frame IMU readings are unchanged by a world rotation
        SensorEvent::Imu(s) => SensorEvent::Imu(*s),
        SensorEvent::Odometry(z) => {
            let mut z = z.clone();
            z.position = r * z.position;
            z.velocity = r * z.velocity;
            z.orientation = r * z.orientation;
            SensorEvent::Odometry(z)
        }
    }
}

#[test]
fn rotating_the_world_rotates_the_estimate() {
    let spec = ScenarioSpec::two_sensor(figure_eight(), 10.0).with_seed(5);
    let (truth, events) = simulate(&spec).unwrap();
    let r = UnitQuaternion::from_euler_angles(0.4, -1.1, 2.3);
    let rotated: Vec<SensorEvent> = events.iter().map(|e| rotate_event(e, &r)).collect();
    let x0 = truth.samples[0].state.clone();
    let mut y0 = x0.clone();
    y0.position = r * x0.position;
    y0.velocity = r * x0.velocity;
    y0.orientation = r * x0.orientation;

    let cases = [
        (FilterVariant::Ekf, AdaptationScheme::VariationalBayes),
        (FilterVariant::Akf, AdaptationScheme::VariationalBayes),
        (FilterVariant::Akf, AdaptationScheme::Residual),
    ];
    for (variant, scheme) in cases {
        let mut cfg = config(variant, &spec);
        cfg.akf_scheme = scheme;
        // a diagonal projection depends on the frame
        cfg.diagonal_r = false;
        let mut turned = cfg.clone();
        turned.gravity = r * cfg.gravity;
        let mut a = FusionEngine::new(cfg, x0.clone()).unwrap();
        let mut b = FusionEngine::new(turned, y0.clone()).unwrap();
        let mut worst = 0.0_f64;
        for (ea, eb) in events.iter().zip(&rotated) {
            a.fuse_step(ea).unwrap();
            b.fuse_step(eb).unwrap();
            let (xa, xb) = (a.nominal(), b.nominal());
            worst = worst
                .max((r * xa.position - xb.position).amax())
                .max((r * xa.velocity - xb.velocity).amax())
                .max(
                    attitude_error(&(r * xa.orientation), &xb.orientation)
                        .0
                        .amax(),
                );
        }
        assert!(worst < 1e-8, "{variant} {scheme:?}: {worst}");
    }
}

#[test]
fn imu_only_stream_never_shrinks_covariance() {
    let spec = ScenarioSpec::two_sensor(figure_eight(), 5.0);
    let (truth, events) = simulate(&spec).unwrap();
    let mut cfg = config(FilterVariant::VbAmcckf, &spec);
    cfg.process_noise = DMatrix::identity(ERROR_DIM, ERROR_DIM) * 1e-6;
    let mut engine = FusionEngine::new(cfg, truth.samples[0].state.clone()).unwrap();
    let mut last = engine.covariance().trace();
    for e in events.iter().filter(|e| matches!(e, SensorEvent::Imu(_))) {
        engine.fuse_step(e).unwrap();
        let trace = engine.covariance().trace();
        assert!(trace >= last - 1e-12 * last, "{last} -> {trace}");
        last = trace;
    }
}

#[test]
fn kernel_filters_match_ekf_without_outliers() {
    let spec = ScenarioSpec::two_sensor(figure_eight(), 30.0).with_seed(2);
    let (truth, events) = simulate(&spec).unwrap();
    let x0 = truth.samples[0].state.clone();
    let (_, ekf) = run(
        config(FilterVariant::Ekf, &spec),
        x0.clone(),
        &events,
        &truth,
        |_, _| {},
    );
    let (_, mcc) = run(
        config(FilterVariant::Mcckf, &spec),
        x0,
        &events,
        &truth,
        |_, _| {},
    );
    let (a, b) = (rmse(&ekf), rmse(&mcc));
    assert!((a - b).abs() < 0.05 * a, "ekf {a}, mcckf {b}");
}
