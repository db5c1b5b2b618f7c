//! Run configuration: a `key = value` text file plus command-line overrides.
//!
//! ```text
//! # comments start with '#'
//! filter = vb-amcckf
//! scenario = outliers
//! window = 10
//! rho = 0.97
//! sigma = adaptive        # or a positive number for a static bandwidth
//! sigma_min = 2
//! r0 = 0.01               # scalar times I, or nine diagonal entries
//! r0.vio1 = 0.02          # per-sensor override
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::bandwidth::{BandwidthBounds, BandwidthMode};
use crate::eskf::{
    AdaptationScheme, FilterVariant, FusionConfig, SensorConfig, ERROR_DIM, FUSION_BANDWIDTH,
};
use crate::sim::ScenarioSpec;
use crate::{Error, Result, SensorId};

pub type Diagonal = [f64; ERROR_DIM];

/// Where the event stream comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Scenario(String),
    Dataset {
        stream: PathBuf,
        truth: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub filter: FilterVariant,
    pub akf_scheme: AdaptationScheme,
    pub window: usize,
    pub rho: f64,
    /// `Some` selects a static bandwidth, `None` the adaptive one.
    pub sigma: Option<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Default `R̂₀` diagonal for every sensor.
    pub r0: Diagonal,
    pub r0_sensor: BTreeMap<String, Diagonal>,
    /// `None` takes `Q` from the scenario's IMU noise (or `1e-6·I` for datasets).
    pub q0: Option<Diagonal>,
    pub p0: Diagonal,
    pub beta: f64,
    /// `None` picks the per-scheme default.
    pub adapt_q: Option<bool>,
    pub diagonal_r: bool,
    pub seed: u64,
    pub source: Source,
    /// Overrides the scenario duration (seconds).
    pub duration: Option<f64>,
    /// Odometry ids accepted from a dataset; empty accepts all.
    pub sensors: Vec<SensorId>,
    pub out: PathBuf,
    pub estimates_file: String,
    pub metrics_file: String,
    pub timing_file: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            filter: FilterVariant::VbAmcckf,
            akf_scheme: AdaptationScheme::VariationalBayes,
            window: 10,
            rho: 0.97,
            sigma: None,
            sigma_min: FUSION_BANDWIDTH.min,
            sigma_max: FUSION_BANDWIDTH.max,
            r0: [0.01; ERROR_DIM],
            r0_sensor: BTreeMap::new(),
            q0: None,
            p0: [0.01; ERROR_DIM],
            beta: 1.0,
            adapt_q: None,
            diagonal_r: true,
            seed: 0,
            source: Source::Scenario("outliers".into()),
            duration: None,
            sensors: Vec::new(),
            out: PathBuf::from("out"),
            estimates_file: "estimates.csv".into(),
            metrics_file: "metrics.json".into(),
            timing_file: "timing.json".into(),
        }
    }
}

pub const KEYS: [&str; 23] = [
    "filter",
    "akf_scheme",
    "window",
    "rho",
    "sigma",
    "sigma_min",
    "sigma_max",
    "r0",
    "q0",
    "p0",
    "beta",
    "adapt_q",
    "diagonal_r",
    "seed",
    "scenario",
    "dataset",
    "truth",
    "duration",
    "sensors",
    "out",
    "estimates",
    "metrics",
    "timing",
];

impl RunConfig {
    /// Parse and validate a config file's contents.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_config(path)?)
    }

    /// Apply the settings of a config text on top of `self` without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", i + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one setting. Call [`RunConfig::validate`] after the last one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(sensor) = key.strip_prefix("r0.") {
            if sensor.is_empty() {
                return Err(Error::config(key, "missing sensor id after `r0.`"));
            }
            self.r0_sensor
                .insert(sensor.to_owned(), diagonal(key, value)?);
            return Ok(());
        }
        match key {
            "filter" => self.filter = value.parse()?,
            "akf_scheme" => self.akf_scheme = value.parse()?,
            "window" => self.window = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "sigma" => {
                self.sigma = match value {
                    "adaptive" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "sigma_min" => self.sigma_min = parse(key, value)?,
            "sigma_max" => self.sigma_max = parse(key, value)?,
            "r0" => self.r0 = diagonal(key, value)?,
            "q0" => {
                self.q0 = match value {
                    "auto" => None,
                    v => Some(diagonal(key, v)?),
                }
            }
            "p0" => self.p0 = diagonal(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "adapt_q" => {
                self.adapt_q = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "diagonal_r" => self.diagonal_r = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "scenario" => self.source = Source::Scenario(value.to_owned()),
            "dataset" => {
                let truth = match &self.source {
                    Source::Dataset { truth, .. } => truth.clone(),
                    Source::Scenario(_) => None,
                };
                self.source = Source::Dataset {
                    stream: value.into(),
                    truth,
                };
            }
            "truth" => match &mut self.source {
                Source::Dataset { truth, .. } => *truth = Some(value.into()),
                Source::Scenario(_) => {
                    return Err(Error::config("truth", "set `dataset` before `truth`"))
                }
            },
            "duration" => self.duration = Some(parse(key, value)?),
            "sensors" => {
                self.sensors = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(SensorId::new)
                    .collect()
            }
            "out" => self.out = value.into(),
            "estimates" => self.estimates_file = value.to_owned(),
            "metrics" => self.metrics_file = value.to_owned(),
            "timing" => self.timing_file = value.to_owned(),
            _ => {
                return Err(Error::config(
                    key,
                    format!(
                        "unknown key, expected one of {} or r0.<sensor>",
                        KEYS.join(", ")
                    ),
                ))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::config("window", "must be at least 1"));
        }
        if !(0.9..=1.0).contains(&self.rho) {
            return Err(Error::config(
                "rho",
                format!("must lie in [0.9, 1], got {}", self.rho),
            ));
        }
        self.bandwidth_mode()?;
        check_diagonal("r0", &self.r0, true)?;
        for (s, d) in &self.r0_sensor {
            check_diagonal(&format!("r0.{s}"), d, true)?;
        }
        if let Some(q) = &self.q0 {
            check_diagonal("q0", q, false)?;
        }
        check_diagonal("p0", &self.p0, false)?;
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(
                "beta",
                format!("must lie in (0, 1], got {}", self.beta),
            ));
        }
        if let Some(d) = self.duration {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::config("duration", "must be positive"));
            }
        }
        if let Source::Scenario(name) = &self.source {
            if !ScenarioSpec::PRESETS.contains(&name.as_str()) {
                return Err(Error::config(
                    "scenario",
                    format!(
                        "unknown scenario `{name}`, expected one of {}",
                        ScenarioSpec::PRESETS.join(", ")
                    ),
                ));
            }
        }
        for f in [&self.estimates_file, &self.metrics_file, &self.timing_file] {
            if f.is_empty() {
                return Err(Error::config("output", "file names must not be empty"));
            }
        }
        Ok(())
    }

    pub fn bandwidth_mode(&self) -> Result<BandwidthMode> {
        match self.sigma {
            Some(s) if s > 0.0 && s.is_finite() => Ok(BandwidthMode::Static(s)),
            Some(s) => Err(Error::config(
                "sigma",
                format!("static bandwidth must be positive, got {s}"),
            )),
            None => Ok(BandwidthMode::Adaptive(BandwidthBounds::new(
                self.sigma_min,
                self.sigma_max,
            )?)),
        }
    }

    /// The scenario with seed and duration applied.
    pub fn scenario(&self) -> Result<Option<ScenarioSpec>> {
        match &self.source {
            Source::Dataset { .. } => Ok(None),
            Source::Scenario(name) => {
                let mut spec = ScenarioSpec::preset(name)?;
                if let Some(d) = self.duration {
                    spec.duration = d;
                }
                Ok(Some(spec.with_seed(self.seed)))
            }
        }
    }

    /// Filter configuration for the given sensors. `process_noise` is used
    /// when no `q0` was configured.
    pub fn fusion_config(
        &self,
        sensors: &[SensorId],
        process_noise: &DMatrix<f64>,
    ) -> Result<FusionConfig> {
        let ids: Vec<&str> = sensors.iter().map(SensorId::as_str).collect();
        let mut c = FusionConfig::new(self.filter, &ids);
        c.akf_scheme = self.akf_scheme;
        c.sensors = sensors
            .iter()
            .map(|id| SensorConfig {
                id: id.clone(),
                initial_noise: diag(self.r0_sensor.get(id.as_str()).unwrap_or(&self.r0)),
            })
            .collect();
        c.process_noise = match &self.q0 {
            Some(q) => diag(q),
            None => process_noise.clone(),
        };
        c.initial_covariance = diag(&self.p0);
        c.window = self.window;
        c.forgetting = self.rho;
        c.bandwidth = self.bandwidth_mode()?;
        c.smoothing = self.beta;
        c.adapt_process_noise = self.adapt_q.unwrap_or_else(|| {
            self.filter.scheme(self.akf_scheme) != Some(AdaptationScheme::Residual)
        });
        c.diagonal_r = self.diagonal_r;
        c.validate()?;
        Ok(c)
    }

    /// Canonical `key = value` rendering; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("filter = {}", self.filter),
            format!("akf_scheme = {}", scheme_name(self.akf_scheme)),
            format!("window = {}", self.window),
            format!("rho = {}", self.rho),
            match self.sigma {
                Some(s) => format!("sigma = {s}"),
                None => "sigma = adaptive".into(),
            },
            format!("sigma_min = {}", self.sigma_min),
            format!("sigma_max = {}", self.sigma_max),
            format!("r0 = {}", join(&self.r0)),
        ];
        for (s, d) in &self.r0_sensor {
            lines.push(format!("r0.{s} = {}", join(d)));
        }
        lines.push(match &self.q0 {
            Some(q) => format!("q0 = {}", join(q)),
            None => "q0 = auto".into(),
        });
        lines.push(format!("p0 = {}", join(&self.p0)));
        lines.push(format!("beta = {}", self.beta));
        lines.push(match self.adapt_q {
            Some(b) => format!("adapt_q = {b}"),
            None => "adapt_q = auto".into(),
        });
        lines.push(format!("diagonal_r = {}", self.diagonal_r));
        lines.push(format!("seed = {}", self.seed));
        match &self.source {
            Source::Scenario(name) => lines.push(format!("scenario = {name}")),
            Source::Dataset { stream, truth } => {
                lines.push(format!("dataset = {}", stream.display()));
                if let Some(t) = truth {
                    lines.push(format!("truth = {}", t.display()));
                }
            }
        }
        if let Some(d) = self.duration {
            lines.push(format!("duration = {d}"));
        }
        if !self.sensors.is_empty() {
            let s: Vec<&str> = self.sensors.iter().map(SensorId::as_str).collect();
            lines.push(format!("sensors = {}", s.join(",")));
        }
        lines.push(format!("out = {}", self.out.display()));
        lines.push(format!("estimates = {}", self.estimates_file));
        lines.push(format!("metrics = {}", self.metrics_file));
        lines.push(format!("timing = {}", self.timing_file));
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}

pub fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))
}

fn scheme_name(s: AdaptationScheme) -> &'static str {
    match s {
        AdaptationScheme::Residual => "residual",
        AdaptationScheme::VariationalBayes => "vb",
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

/// A scalar (times identity) or nine comma-separated diagonal entries.
fn diagonal(key: &str, value: &str) -> Result<Diagonal> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    match parts.len() {
        1 => Ok([parts[0]; ERROR_DIM]),
        ERROR_DIM => {
            let mut d = [0.0; ERROR_DIM];
            d.copy_from_slice(&parts);
            Ok(d)
        }
        n => Err(Error::config(
            key,
            format!("expected 1 or {ERROR_DIM} values, got {n}"),
        )),
    }
}

fn check_diagonal(key: &str, d: &Diagonal, strictly: bool) -> Result<()> {
    let ok = |x: &f64| x.is_finite() && if strictly { *x > 0.0 } else { *x >= 0.0 };
    if d.iter().all(ok) {
        Ok(())
    } else if strictly {
        Err(Error::config(key, "entries must be finite and positive"))
    } else {
        Err(Error::config(
            key,
            "entries must be finite and non-negative",
        ))
    }
}

fn diag(d: &Diagonal) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(d))
}

fn join(d: &Diagonal) -> String {
    if d.iter().all(|x| *x == d[0]) {
        d[0].to_string()
    } else {
        d.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}
