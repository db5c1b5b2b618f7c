use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amcckf::config::RunConfig;
use amcckf::dataset::{write_stream_file, write_truth_file};
use amcckf::eskf::FilterVariant;
use amcckf::experiment::{self, write_json, Summary};
use amcckf::metrics::linear_fit;
use amcckf::sim::simulate;
use amcckf::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(
    name = "amcckf",
    version,
    about = "Adaptive MCC Kalman filtering of IMU and odometry streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write dataset.csv and truth.csv.
    Simulate(Common),
    /// Run one filter and write estimates, metrics and timing.
    Fuse(Common),
    /// Run several filters on the same stream.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated filters (default: all).
        #[arg(long, value_delimiter = ',')]
        filters: Vec<FilterVariant>,
    },
    /// Time filters over several window lengths.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [FilterVariant::RAmcckf, FilterVariant::VbAmcckf])]
        filters: Vec<FilterVariant>,
        #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10, 20])]
        windows: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Args)]
struct Common {
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    filter: Option<FilterVariant>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, conflicts_with = "dataset")]
    scenario: Option<String>,
    /// Stream CSV to fuse instead of a scenario.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Truth CSV that goes with --dataset.
    #[arg(long, requires = "dataset")]
    truth: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> amcckf::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&amcckf::config::read_config(path)?)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.filter {
            cfg.filter = f;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = &self.scenario {
            cfg.set("scenario", s)?;
        }
        if let Some(d) = &self.dataset {
            cfg.set("dataset", &d.display().to_string())?;
        }
        if let Some(t) = &self.truth {
            cfg.set("truth", &t.display().to_string())?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                field: kv.clone(),
                reason: "expected KEY=VALUE".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_DATA
            })
        }
    }
}

fn run(command: Command) -> amcckf::Result<()> {
    match command {
        Command::Simulate(common) => simulate_cmd(&common.resolve()?),
        Command::Fuse(common) => {
            let cfg = common.resolve()?;
            let out = experiment::run_experiment(&cfg)?;
            print_summaries(&[Summary::of(&out)]);
            println!("wrote {}", cfg.out.display());
            Ok(())
        }
        Command::Compare { common, filters } => {
            let cfg = common.resolve()?;
            let filters = if filters.is_empty() {
                FilterVariant::ALL.to_vec()
            } else {
                filters
            };
            let runs = experiment::compare(&cfg, &filters)?;
            let path = experiment::write_comparison(&cfg.out, &cfg, &runs)?;
            print_summaries(&runs.iter().map(Summary::of).collect::<Vec<_>>());
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Bench {
            common,
            filters,
            windows,
            repeats,
        } => {
            let base = common.resolve()?;
            bench_cmd(&base, &filters, &windows, repeats)
        }
    }
}

fn simulate_cmd(cfg: &RunConfig) -> amcckf::Result<()> {
    let Some(spec) = cfg.scenario()? else {
        return Err(Error::Config {
            field: "dataset".into(),
            reason: "simulate needs a scenario, not a dataset".into(),
        });
    };
    let (truth, events) = simulate(&spec)?;
    std::fs::create_dir_all(&cfg.out)?;
    let stream = cfg.out.join("dataset.csv");
    write_stream_file(&stream, &events)?;
    write_truth_file(&cfg.out.join("truth.csv"), &truth)?;
    println!("wrote {} events to {}", events.len(), stream.display());
    Ok(())
}

fn bench_cmd(
    base: &RunConfig,
    filters: &[FilterVariant],
    windows: &[usize],
    repeats: usize,
) -> amcckf::Result<()> {
    if filters.is_empty() || windows.is_empty() {
        return Err(Error::Config {
            field: "bench".into(),
            reason: "need at least one filter and one window".into(),
        });
    }
    let mut configs = Vec::new();
    for &f in filters {
        for &w in windows {
            let mut c = base.clone();
            c.filter = f;
            c.window = w;
            c.validate()?;
            configs.push(c);
        }
    }
    let rows = experiment::bench(&configs, repeats)?;
    println!(
        "{:<10} {:>6} {:>14} {:>14} {:>14}",
        "filter", "window", "step mean ns", "step std ns", "corr mean ns"
    );
    for r in &rows {
        println!(
            "{:<10} {:>6} {:>14.0} {:>14.0} {:>14.0}",
            r.filter, r.window, r.step.mean_ns, r.step.std_ns, r.correction.mean_ns
        );
    }
    if windows.len() >= 2 {
        for &f in filters {
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.filter == f.as_str())
                .map(|r| (r.window as f64, r.step.mean_ns))
                .unzip();
            let fit = linear_fit(&x, &y);
            println!(
                "{f}: {:.1} ns per window slot, R^2 = {:.3}",
                fit.slope, fit.r_squared
            );
        }
    }
    std::fs::create_dir_all(&base.out)?;
    let path = base.out.join("bench.json");
    write_json(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_summaries(rows: &[Summary]) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.4}"));
    println!(
        "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8}",
        "filter", "rmse_p", "rmse_v", "rmse_att", "nees", "steps"
    );
    for s in rows {
        println!(
            "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8}",
            s.filter,
            fmt(s.rmse_position),
            fmt(s.rmse_velocity),
            fmt(s.rmse_attitude),
            fmt(s.nees_mean),
            s.steps
        );
    }
}
