//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! problem.d = 2
//! problem.c = ones          # or rows separated by ';', e.g. "0,1;2,0"
//! arch.width = 8
//! train.epochs = 200
//! seed = 0
//! ```
//!
//! Every key is optional and falls back to the default; unknown keys are
//! rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mfc_dgm::model::{CostMatrix, MfcpSpec, StateCost, TerminalCost};
use mfc_dgm::network::{Architecture, LayerKind};
use mfc_dgm::solver::{LossKind, Resampling, ScheduleKind, Temperature, TrainingConfig};

use crate::error::CliError;

pub const DEFAULT_DEPTH: usize = 4;
pub const DEFAULT_WIDTH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: MfcpSpec,
    pub arch: Architecture,
    pub train: TrainingConfig,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

const KEYS: &[&str] = &[
    "problem.d",
    "problem.T",
    "problem.M",
    "problem.c",
    "arch.kind",
    "arch.depth",
    "arch.width",
    "train.loss",
    "train.samples",
    "train.epochs",
    "train.steps",
    "train.lr",
    "train.schedule",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.weight_decay",
    "train.clip_norm",
    "train.tau",
    "train.tau_mode",
    "train.tolerance",
    "train.resample",
    "seed",
    "out",
];

impl RunConfig {
    /// The worked example in `d` states with the default training budget.
    pub fn default_for(d: usize) -> Self {
        Self {
            problem: MfcpSpec::example(d),
            arch: Architecture::new(d, LayerKind::Gated, DEFAULT_DEPTH, DEFAULT_WIDTH),
            train: TrainingConfig::default(),
            out: None,
            seed: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("unknown key '{key}' on line {}", lineno + 1)));
            }
            if pairs.iter().any(|(k, _)| k == key) {
                return Err(CliError::Config(format!("duplicate key '{key}' on line {}", lineno + 1)));
            }
            pairs.push((key.to_string(), value.trim().to_string()));
        }
        let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());

        let d: usize = match get("problem.d") {
            Some(v) => parse_num("problem.d", v)?,
            None => 2,
        };
        let mut cfg = Self::default_for(d);
        if let Some(v) = get("problem.T") {
            cfg.problem.horizon = parse_num("problem.T", v)?;
        }
        if let Some(v) = get("problem.M") {
            cfg.problem.max_rate = parse_num("problem.M", v)?;
        }
        if let Some(v) = get("problem.c") {
            cfg.problem.cost = parse_costs(v, d)?;
        }
        if let Some(v) = get("arch.kind") {
            cfg.arch.kind = match v {
                "gated" => LayerKind::Gated,
                "plain" => LayerKind::Plain,
                _ => return Err(bad("arch.kind", v, "gated | plain")),
            };
        }
        if let Some(v) = get("arch.depth") {
            cfg.arch.depth = parse_num("arch.depth", v)?;
        }
        if let Some(v) = get("arch.width") {
            cfg.arch.width = parse_num("arch.width", v)?;
        }
        let t = &mut cfg.train;
        if let Some(v) = get("train.loss") {
            t.loss = match v {
                "uniform" => LossKind::Uniform,
                "l2" => LossKind::L2,
                _ => return Err(bad("train.loss", v, "uniform | l2")),
            };
        }
        if let Some(v) = get("train.samples") {
            t.samples = parse_num("train.samples", v)?;
        }
        if let Some(v) = get("train.epochs") {
            t.epochs = parse_num("train.epochs", v)?;
        }
        if let Some(v) = get("train.steps") {
            t.steps_per_epoch = parse_num("train.steps", v)?;
        }
        if let Some(v) = get("train.lr") {
            t.peak_lr = parse_num("train.lr", v)?;
        }
        if let Some(v) = get("train.schedule") {
            t.schedule = match v {
                "one_cycle" => ScheduleKind::OneCycle,
                "constant" => ScheduleKind::Constant,
                _ => return Err(bad("train.schedule", v, "one_cycle | constant")),
            };
        }
        if let Some(v) = get("train.beta1") {
            t.beta1 = parse_num("train.beta1", v)?;
        }
        if let Some(v) = get("train.beta2") {
            t.beta2 = parse_num("train.beta2", v)?;
        }
        if let Some(v) = get("train.eps") {
            t.eps = parse_num("train.eps", v)?;
        }
        if let Some(v) = get("train.weight_decay") {
            t.weight_decay = parse_num("train.weight_decay", v)?;
        }
        if let Some(v) = get("train.clip_norm") {
            t.clip_norm = if v == "none" { f64::INFINITY } else { parse_num("train.clip_norm", v)? };
        }
        let tau = match get("train.tau") {
            Some(v) => Some(parse_num::<f64>("train.tau", v)?),
            None => None,
        };
        let mode = get("train.tau_mode").unwrap_or("relative");
        let tau_value = tau.unwrap_or(match t.temperature {
            Temperature::Relative(v) | Temperature::Absolute(v) => v,
        });
        t.temperature = match mode {
            "relative" => Temperature::Relative(tau_value),
            "absolute" => Temperature::Absolute(tau_value),
            _ => return Err(bad("train.tau_mode", mode, "relative | absolute")),
        };
        if let Some(v) = get("train.tolerance") {
            t.tolerance = if v == "none" { None } else { Some(parse_num("train.tolerance", v)?) };
        }
        if let Some(v) = get("train.resample") {
            t.resampling = match v {
                "epoch" => Resampling::PerEpoch,
                "step" => Resampling::PerStep,
                _ => return Err(bad("train.resample", v, "epoch | step")),
            };
        }
        if let Some(v) = get("seed") {
            cfg.seed = parse_num("seed", v)?;
        }
        if let Some(v) = get("out") {
            cfg.out = Some(PathBuf::from(v));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.problem.validate()?;
        self.arch.validate()?;
        if self.arch.dim != self.problem.dim {
            return Err(CliError::Config(format!(
                "arch dimension {} does not match problem.d = {}",
                self.arch.dim, self.problem.dim
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let p = &self.problem;
        let t = &self.train;
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("problem.d", p.dim.to_string());
        line("problem.T", p.horizon.to_string());
        line("problem.M", p.max_rate.to_string());
        line("problem.c", render_costs(&p.cost));
        line(
            "arch.kind",
            match self.arch.kind {
                LayerKind::Gated => "gated",
                LayerKind::Plain => "plain",
            }
            .into(),
        );
        line("arch.depth", self.arch.depth.to_string());
        line("arch.width", self.arch.width.to_string());
        line(
            "train.loss",
            match t.loss {
                LossKind::Uniform => "uniform",
                LossKind::L2 => "l2",
            }
            .into(),
        );
        line("train.samples", t.samples.to_string());
        line("train.epochs", t.epochs.to_string());
        line("train.steps", t.steps_per_epoch.to_string());
        line("train.lr", t.peak_lr.to_string());
        line(
            "train.schedule",
            match t.schedule {
                ScheduleKind::OneCycle => "one_cycle",
                ScheduleKind::Constant => "constant",
            }
            .into(),
        );
        line("train.beta1", t.beta1.to_string());
        line("train.beta2", t.beta2.to_string());
        line("train.eps", t.eps.to_string());
        line("train.weight_decay", t.weight_decay.to_string());
        line(
            "train.clip_norm",
            if t.clip_norm.is_finite() { t.clip_norm.to_string() } else { "none".into() },
        );
        let (mode, tau) = match t.temperature {
            Temperature::Relative(v) => ("relative", v),
            Temperature::Absolute(v) => ("absolute", v),
        };
        line("train.tau", tau.to_string());
        line("train.tau_mode", mode.into());
        line("train.tolerance", t.tolerance.map_or("none".into(), |v| v.to_string()));
        line(
            "train.resample",
            match t.resampling {
                Resampling::PerEpoch => "epoch",
                Resampling::PerStep => "step",
            }
            .into(),
        );
        line("seed", self.seed.to_string());
        if let Some(out) = &self.out {
            line("out", out.display().to_string());
        }
        s
    }
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Config(format!("invalid value '{value}' for key '{key}' (expected {expected})"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value '{value}' for key '{key}'")))
}

/// `ones`, or `d` rows of `d` comma-separated numbers separated by `;`.
pub fn parse_costs(value: &str, d: usize) -> Result<CostMatrix, CliError> {
    if value == "ones" {
        return Ok(CostMatrix::ones(d));
    }
    let rows = value
        .split(';')
        .map(|row| row.split(',').map(|x| parse_num::<f64>("problem.c", x.trim())).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    if rows.len() != d {
        return Err(CliError::Config(format!("problem.c has {} rows, expected {d}", rows.len())));
    }
    Ok(CostMatrix::from_rows(rows)?)
}

pub fn render_costs(c: &CostMatrix) -> String {
    if c.is_ones() {
        return "ones".into();
    }
    let d = c.dim();
    (0..d)
        .map(|i| (0..d).map(|j| c.get(i, j).to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

/// The worked example with the given dimension, horizon, rate bound and costs.
pub fn example_problem(d: usize, horizon: f64, max_rate: f64, cost: CostMatrix) -> Result<MfcpSpec, CliError> {
    Ok(MfcpSpec::new(d, horizon, max_rate, cost, StateCost::OwnMass, TerminalCost::OwnMass)?)
}
