//! Flat `key = value` run configuration with dotted section names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use bkrnet::estimate::TrainConfig;
use bkrnet::flow::FlowArch;
use bkrnet::pdesolve::{LossWeights, SolveConfig};
use bkrnet::problems::{
    fourdim_setup, keller_segel_setup, logistic_classical_setup, logistic_kr_setup, planar_density_setup,
    DensitySetup, PdeSetup,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}` does not apply to {target}")]
    NotApplicable { key: String, target: String },
    #[error("key `{key}`: {message} (got {value:?})")]
    Invalid { key: String, value: String, message: String },
    #[error("missing key `{0}`")]
    Missing(String),
}

/// Density benchmarks.
pub const TRUTHS: [&str; 3] = ["annulus", "gaussian-mixture", "logistic-holes"];
/// PDE benchmarks.
pub const PROBLEMS: [&str; 3] = ["elliptic-4d", "elliptic-2d", "keller-segel"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Kr,
    Classical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSection {
    pub kind: FlowKind,
    pub depths: Vec<usize>,
    pub width: usize,
    pub hidden_layers: usize,
}

impl FlowSection {
    pub fn arch(&self, dim: usize) -> Result<FlowArch, bkrnet::flow::FlowError> {
        let stages = self.depths.len();
        match self.kind {
            FlowKind::Kr => FlowArch::new(dim, stages + 1, self.depths.clone(), vec![self.width; stages], self.hidden_layers),
            FlowKind::Classical => FlowArch::new(dim, 2, self.depths.clone(), vec![self.width; stages], self.hidden_layers),
        }
    }

    fn from_arch(arch: &FlowArch) -> Self {
        Self {
            kind: if arch.blocks == 2 && arch.dim > 2 {
                FlowKind::Classical
            } else {
                FlowKind::Kr
            },
            depths: arch.depths.clone(),
            width: arch.widths[0],
            hidden_layers: arch.hidden_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub eval_every: usize,
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub n_train: usize,
    pub n_validation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdeSection {
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_validation: usize,
    pub adapt_rounds: usize,
    pub adapt_rate: f64,
    pub loss_pde: f64,
    pub loss_boundary: f64,
    pub loss_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Density(DataSection),
    Pde(PdeSection),
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Truth name for density runs, problem name for PDE runs.
    pub target: String,
    pub seed: u64,
    pub flow: FlowSection,
    pub train: TrainSection,
    pub task: Task,
}

fn density_defaults(truth: &str) -> DensitySetup {
    match truth {
        "logistic-holes" => logistic_kr_setup(),
        _ => planar_density_setup(),
    }
}

fn pde_defaults(problem: &str) -> PdeSetup {
    match problem {
        "keller-segel" => keller_segel_setup(),
        "elliptic-2d" => {
            let mut s = fourdim_setup();
            s.arch = FlowArch::kr(2, vec![4], 16).expect("valid architecture");
            s.solve.epochs = 50;
            s.solve.adaptive_rounds = 1;
            s.n_pde = 1000;
            s.solve.batch_size = 500;
            s.solve.decay_every = 1000;
            s.n_boundary = 400;
            s.n_validation = 10_000;
            s
        }
        _ => fourdim_setup(),
    }
}

impl RunConfig {
    /// Reference settings of a benchmark.
    pub fn defaults(target: &str) -> Result<Self, ConfigError> {
        let invalid = || ConfigError::Invalid {
            key: "problem".into(),
            value: target.into(),
            message: format!("expected one of {}", TRUTHS.iter().chain(&PROBLEMS).cloned().collect::<Vec<_>>().join(", ")),
        };
        if TRUTHS.contains(&target) {
            let s = density_defaults(target);
            Ok(Self {
                target: target.into(),
                seed: 0,
                flow: FlowSection::from_arch(&s.arch),
                train: train_section(&s.train),
                task: Task::Density(DataSection {
                    train: None,
                    validation: None,
                    n_train: s.n_train,
                    n_validation: s.n_validation,
                }),
            })
        } else if PROBLEMS.contains(&target) {
            let s = pde_defaults(target);
            Ok(Self {
                target: target.into(),
                seed: 0,
                flow: FlowSection::from_arch(&s.arch),
                train: TrainSection {
                    epochs: s.solve.epochs,
                    batch_size: s.solve.batch_size,
                    lr: s.solve.lr,
                    decay: s.solve.decay,
                    decay_every: s.solve.decay_every,
                    eval_every: s.solve.eval_every,
                    chunk: s.solve.chunk,
                },
                task: Task::Pde(PdeSection {
                    n_interior: s.n_pde,
                    n_boundary: s.n_boundary,
                    n_validation: s.n_validation,
                    adapt_rounds: s.solve.adaptive_rounds,
                    adapt_rate: s.solve.update_rate,
                    loss_pde: s.weights.pde,
                    loss_boundary: s.weights.boundary,
                    loss_grad: s.weights.grad,
                }),
            })
        } else {
            Err(invalid())
        }
    }

    pub fn is_density(&self) -> bool {
        matches!(self.task, Task::Density(_))
    }

    /// Coordinates of the benchmark.
    pub fn dim(&self) -> usize {
        match self.target.as_str() {
            "logistic-holes" => 8,
            "elliptic-4d" => 4,
            _ => 2,
        }
    }

    pub fn arch(&self) -> Result<FlowArch, ConfigError> {
        self.flow.arch(self.dim()).map_err(|e| ConfigError::Invalid {
            key: "flow.depths".into(),
            value: join(&self.flow.depths),
            message: e.to_string(),
        })
    }

    pub fn train_config(&self) -> TrainConfig<f64> {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            decay: t.decay,
            decay_every: t.decay_every,
            eval_every: t.eval_every,
            chunk: t.chunk,
        }
    }

    pub fn solve_config(&self) -> Option<(SolveConfig<f64>, LossWeights<f64>)> {
        let Task::Pde(p) = &self.task else {
            return None;
        };
        let t = &self.train;
        Some((
            SolveConfig {
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr: t.lr,
                decay: t.decay,
                decay_every: t.decay_every,
                adaptive_rounds: p.adapt_rounds,
                update_rate: p.adapt_rate,
                eval_every: t.eval_every,
                chunk: t.chunk,
            },
            LossWeights::new(p.loss_pde, p.loss_boundary, p.loss_grad).expect("validated"),
        ))
    }

    /// Parses a configuration file. Keys not given keep the defaults of the
    /// benchmark named by `problem`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, None)
    }

    /// As [`RunConfig::parse`], with `problem` taken from `target` when given.
    pub fn parse_with(text: &str, target: Option<&str>) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: k });
            }
        }
        if let Some(t) = target {
            map.insert("problem".into(), t.into());
        }
        Self::from_map(map)
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        let target = map.remove("problem").ok_or_else(|| ConfigError::Missing("problem".into()))?;
        let mut cfg = Self::defaults(&target)?;
        for (key, value) in map {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let not_here = || ConfigError::NotApplicable {
            key: key.into(),
            target: self.target.clone(),
        };
        match key {
            "seed" => self.seed = parse(key, value)?,
            "flow.kind" => {
                self.flow.kind = match value {
                    "kr" => FlowKind::Kr,
                    "classical" => FlowKind::Classical,
                    _ => return Err(invalid(key, value, "expected `kr` or `classical`")),
                }
            }
            "flow.depths" => {
                self.flow.depths = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "flow.width" => self.flow.width = parse(key, value)?,
            "flow.hidden_layers" => self.flow.hidden_layers = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.decay" => self.train.decay = parse(key, value)?,
            "train.decay_every" => self.train.decay_every = parse(key, value)?,
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "train.chunk" => self.train.chunk = parse(key, value)?,
            k if k.starts_with("data.") => {
                let Task::Density(d) = &mut self.task else {
                    return Err(not_here());
                };
                match k {
                    "data.train" => d.train = Some(PathBuf::from(value)),
                    "data.validation" => d.validation = Some(PathBuf::from(value)),
                    "data.n_train" => d.n_train = parse(key, value)?,
                    "data.n_validation" => d.n_validation = parse(key, value)?,
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
            }
            k if k.starts_with("pde.") || k.starts_with("adapt.") || k.starts_with("loss.") => {
                let Task::Pde(p) = &mut self.task else {
                    return Err(not_here());
                };
                match k {
                    "pde.n_interior" => p.n_interior = parse(key, value)?,
                    "pde.n_boundary" => p.n_boundary = parse(key, value)?,
                    "pde.n_validation" => p.n_validation = parse(key, value)?,
                    "adapt.rounds" => p.adapt_rounds = parse(key, value)?,
                    "adapt.update_rate" => p.adapt_rate = parse(key, value)?,
                    "loss.pde" => p.loss_pde = parse(key, value)?,
                    "loss.boundary" => p.loss_boundary = parse(key, value)?,
                    "loss.grad" => p.loss_grad = parse(key, value)?,
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Checks every field before any computation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(invalid(key, &v.to_string(), "must be positive"))
            } else {
                Ok(())
            }
        };
        if self.flow.depths.is_empty() || self.flow.depths.contains(&0) {
            return Err(invalid("flow.depths", &join(&self.flow.depths), "need positive depths"));
        }
        positive("flow.width", self.flow.width)?;
        positive("flow.hidden_layers", self.flow.hidden_layers)?;
        self.arch()?;
        let t = &self.train;
        positive("train.batch_size", t.batch_size)?;
        positive("train.eval_every", t.eval_every)?;
        positive("train.chunk", t.chunk)?;
        if t.decay_every == 0 {
            return Err(invalid("train.decay_every", "0", "must be positive"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(invalid("train.lr", &t.lr.to_string(), "must be a positive number"));
        }
        if !(t.decay > 0.0 && t.decay <= 1.0) {
            return Err(invalid("train.decay", &t.decay.to_string(), "must lie in (0, 1]"));
        }
        match &self.task {
            Task::Density(d) => {
                if d.train.is_none() {
                    positive("data.n_train", d.n_train)?;
                    if t.batch_size > d.n_train {
                        return Err(invalid("train.batch_size", &t.batch_size.to_string(), "exceeds data.n_train"));
                    }
                }
                if d.validation.is_none() {
                    positive("data.n_validation", d.n_validation)?;
                }
            }
            Task::Pde(p) => {
                positive("pde.n_interior", p.n_interior)?;
                positive("pde.n_validation", p.n_validation)?;
                if t.batch_size > p.n_interior {
                    return Err(invalid("train.batch_size", &t.batch_size.to_string(), "exceeds pde.n_interior"));
                }
                if !(p.adapt_rate > 0.0 && p.adapt_rate <= 1.0) {
                    return Err(invalid("adapt.update_rate", &p.adapt_rate.to_string(), "must lie in (0, 1]"));
                }
                for (k, w) in [("loss.pde", p.loss_pde), ("loss.boundary", p.loss_boundary), ("loss.grad", p.loss_grad)] {
                    if !(w.is_finite() && w >= 0.0) {
                        return Err(invalid(k, &w.to_string(), "must be a non-negative number"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical text: every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("problem", self.target.clone());
        put("seed", self.seed.to_string());
        put(
            "flow.kind",
            match self.flow.kind {
                FlowKind::Kr => "kr",
                FlowKind::Classical => "classical",
            }
            .into(),
        );
        put("flow.depths", join(&self.flow.depths));
        put("flow.width", self.flow.width.to_string());
        put("flow.hidden_layers", self.flow.hidden_layers.to_string());
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", t.lr.to_string());
        put("train.decay", t.decay.to_string());
        put("train.decay_every", t.decay_every.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("train.chunk", t.chunk.to_string());
        match &self.task {
            Task::Density(d) => {
                if let Some(p) = &d.train {
                    put("data.train", p.display().to_string());
                }
                if let Some(p) = &d.validation {
                    put("data.validation", p.display().to_string());
                }
                put("data.n_train", d.n_train.to_string());
                put("data.n_validation", d.n_validation.to_string());
            }
            Task::Pde(p) => {
                put("pde.n_interior", p.n_interior.to_string());
                put("pde.n_boundary", p.n_boundary.to_string());
                put("pde.n_validation", p.n_validation.to_string());
                put("adapt.rounds", p.adapt_rounds.to_string());
                put("adapt.update_rate", p.adapt_rate.to_string());
                put("loss.pde", p.loss_pde.to_string());
                put("loss.boundary", p.loss_boundary.to_string());
                put("loss.grad", p.loss_grad.to_string());
            }
        }
        s
    }
}

fn train_section(t: &TrainConfig<f64>) -> TrainSection {
    TrainSection {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        decay: t.decay,
        decay_every: t.decay_every,
        eval_every: t.eval_every,
        chunk: t.chunk,
    }
}

/// Classical-NF counterpart of the logistic-holes benchmark.
pub fn classical_logistic() -> RunConfig {
    let s = logistic_classical_setup();
    let mut c = RunConfig::defaults("logistic-holes").expect("known truth");
    c.flow = FlowSection::from_arch(&s.arch);
    c
}

fn join(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn invalid(key: &str, value: &str, message: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        message: message.into(),
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError> {
    value
        .parse()
        .map_err(|_| invalid(key, value, &format!("cannot parse as {}", std::any::type_name::<V>())))
}
