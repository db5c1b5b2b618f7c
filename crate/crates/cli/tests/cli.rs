use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn amcckf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amcckf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_then_fuse_dataset_with_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&amcckf(
        &[
            "simulate",
            "--scenario",
            "outliers",
            "--seed",
            "4",
            "--set",
            "duration=3",
            "--out",
            "sim",
        ],
        d,
    ));
    assert!(d.join("sim/dataset.csv").exists());
    assert!(d.join("sim/truth.csv").exists());

    ok(&amcckf(
        &[
            "fuse",
            "--dataset",
            "sim/dataset.csv",
            "--truth",
            "sim/truth.csv",
            "--filter",
            "r-amcckf",
            "--out",
            "run",
        ],
        d,
    ));
    let m = json(&d.join("run/metrics.json"));
    assert_eq!(m["filter"], "r-amcckf");
    let steps = m["steps"].as_u64().unwrap() as usize;
    assert!(steps > 0);
    for key in ["time", "r_trace", "kb_inverse", "three_sigma", "error"] {
        assert_eq!(m[key].as_array().unwrap().len(), steps, "{key}");
    }
    assert!(m["rmse_position"]["total"].as_f64().unwrap() < 0.2);
    assert!(m["nees_mean"].as_f64().unwrap() > 0.0);
    let t = json(&d.join("run/timing.json"));
    assert!(t["step"]["mean_ns"].as_f64().unwrap() > 0.0);
    let est = fs::read_to_string(d.join("run/estimates.csv")).unwrap();
    assert_eq!(est.lines().count(), steps + 1);
}

#[test]
fn dataset_without_truth_has_no_accuracy_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&amcckf(
        &[
            "simulate",
            "--scenario",
            "hover",
            "--set",
            "duration=2",
            "--out",
            "sim",
        ],
        d,
    ));
    ok(&amcckf(
        &["fuse", "--dataset", "sim/dataset.csv", "--out", "run"],
        d,
    ));
    let m = json(&d.join("run/metrics.json"));
    assert!(m["rmse_position"].is_null());
    assert!(m["error"].is_null());
}

#[test]
fn fixed_seed_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(&amcckf(
            &[
                "fuse",
                "--scenario",
                "outliers",
                "--seed",
                "11",
                "--set",
                "duration=3",
                "--out",
                out,
            ],
            d,
        ));
    }
    for f in ["estimates.csv", "metrics.json"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("run.cfg"),
        "filter = ekf\nscenario = hover\nduration = 1\nseed = 3\n",
    )
    .unwrap();
    ok(&amcckf(
        &[
            "fuse", "--config", "run.cfg", "--filter", "mcckf", "--out", "o",
        ],
        d,
    ));
    let m = json(&d.join("o/metrics.json"));
    assert_eq!(m["filter"], "mcckf");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["source"], "scenario:hover");
}

#[test]
fn compare_runs_every_filter() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&amcckf(
        &[
            "compare",
            "--scenario",
            "hover",
            "--set",
            "duration=2",
            "--out",
            "cmp",
        ],
        d,
    ));
    let c = json(&d.join("cmp/compare.json"));
    let names: Vec<&str> = c
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["filter"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["ekf", "akf", "mcckf", "r-amcckf", "vb-amcckf"]);
    assert!(d.join("cmp/vb-amcckf/metrics.json").exists());
}

#[test]
fn bench_with_one_config_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&amcckf(
        &[
            "bench",
            "--scenario",
            "hover",
            "--set",
            "duration=1",
            "--filters",
            "ekf",
            "--windows",
            "10",
            "--repeats",
            "1",
            "--out",
            "b",
        ],
        d,
    ));
    let rows = json(&d.join("b/bench.json"));
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["filter"], "ekf");
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.cfg"), "rho = 0.5\n").unwrap();
    for args in [
        &["fuse", "--filter", "ukf"][..],
        &["fuse", "--set", "window=0"],
        &["fuse", "--config", "bad.cfg"],
        &["fuse", "--config", "missing.cfg"],
        &["fuse", "--scenario", "moon"],
        &["simulate", "--dataset", "x.csv"],
    ] {
        let out = amcckf(args, d);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = amcckf(&["fuse", "--config", "bad.cfg"], d);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rho"));
}

#[test]
fn data_errors_exit_with_three_and_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = amcckf(&["fuse", "--dataset", "nope.csv"], d);
    assert_eq!(out.status.code(), Some(3));

    ok(&amcckf(
        &[
            "simulate",
            "--scenario",
            "hover",
            "--set",
            "duration=1",
            "--out",
            "sim",
        ],
        d,
    ));
    let text = fs::read_to_string(d.join("sim/dataset.csv")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    // move an early row far down the file
    let row = lines.remove(2);
    lines.insert(100, row);
    fs::write(d.join("shuffled.csv"), lines.join("\n")).unwrap();
    let out = amcckf(&["fuse", "--dataset", "shuffled.csv"], d);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 101"), "{err}");

    let out = amcckf(
        &[
            "fuse",
            "--dataset",
            "sim/dataset.csv",
            "--set",
            "sensors=vio0",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vio1"));
}
