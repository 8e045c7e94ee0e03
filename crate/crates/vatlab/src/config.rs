//! Flat `key = value` run configuration.
//!
//! Keys use dotted sections (`perturb.eps = 2.0`), `#` starts a comment.
//! Defaults depend on `task`; a config file overrides the defaults and
//! command-line flags override the file. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use vatlab_core::objective::Method;
use vatlab_core::optim::LrSchedule;
use vatlab_core::perturb::{Norm, DEFAULT_XI};
use vatlab_core::{ClassifierSpec, ObjectiveConfig, PerturbConfig, TrainConfig};

use crate::error::{Result, VatlabError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Two half-moons in 2-D.
    Synth2d,
    Mnist,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Synth2d => "synth2d",
            Task::Mnist => "mnist",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "synth2d" => Ok(Task::Synth2d),
            "mnist" => Ok(Task::Mnist),
            _ => Err(VatlabError::Config(format!("unknown task `{}` (synth2d, mnist)", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub method: Method,
    pub seed: u64,
    pub updates: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub record_every: usize,
    pub eval_every: usize,
    pub eps: f64,
    pub xi: f64,
    pub k: usize,
    pub norm: Norm,
    pub alpha: f64,
    pub beta: f64,
    pub hidden: Vec<usize>,
    pub noise_sd: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_validation: usize,
    /// Moons coordinate jitter (synth2d only).
    pub data_noise: f64,
    /// Seed of the dataset draw and split; `None` follows `seed`.
    pub data_seed: Option<u64>,
    pub sweep_eps: Vec<f64>,
    pub sdnorm_samples: usize,
    pub sdnorm_batch: usize,
    pub oracle_trials: usize,
    pub heatmap_res: usize,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn defaults(task: Task) -> RunConfig {
        let base = RunConfig {
            task,
            method: Method::Vat,
            seed: 0,
            updates: 3000,
            lr: 0.01,
            lr_schedule: LrSchedule::Constant,
            batch_labeled: 8,
            batch_unlabeled: 256,
            record_every: 1,
            eval_every: 0,
            eps: 0.2,
            xi: DEFAULT_XI,
            k: 1,
            norm: Norm::L2,
            alpha: 1.0,
            beta: 1.0,
            hidden: vec![50],
            noise_sd: 0.0,
            n_labeled: 8,
            n_unlabeled: 1000,
            n_validation: 1000,
            data_noise: 0.08,
            data_seed: None,
            sweep_eps: vec![0.05, 0.1, 0.2, 0.3, 0.5],
            sdnorm_samples: 64,
            sdnorm_batch: 64,
            oracle_trials: 100,
            heatmap_res: 50,
            out: PathBuf::from("out"),
        };
        match task {
            Task::Synth2d => base,
            Task::Mnist => RunConfig {
                updates: 2000,
                lr: 0.002,
                lr_schedule: LrSchedule::LinearDecay { start_update: 1000 },
                batch_labeled: 64,
                record_every: 10,
                eps: 2.0,
                hidden: vec![256, 128],
                n_labeled: 1000,
                n_unlabeled: 9000,
                sweep_eps: vec![1.0, 2.0, 3.0],
                sdnorm_batch: 256,
                ..base
            },
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "task",
        "method",
        "seed",
        "updates",
        "train.lr",
        "train.lr_schedule",
        "train.batch_labeled",
        "train.batch_unlabeled",
        "train.record_every",
        "train.eval_every",
        "perturb.eps",
        "perturb.xi",
        "perturb.k",
        "perturb.norm",
        "objective.alpha",
        "objective.beta",
        "model.hidden",
        "model.noise_sd",
        "data.n_labeled",
        "data.n_unlabeled",
        "data.n_validation",
        "data.noise",
        "data.seed",
        "sweep.eps",
        "sdnorm.num_samples",
        "sdnorm.batch",
        "oracle.trials",
        "heatmap.resolution",
        "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "task" => {
                let t = Task::parse(v)?;
                if t != self.task {
                    return Err(VatlabError::Config(format!("task is `{}`, cannot be changed to `{}` here", self.task.name(), v)));
                }
            }
            "method" => self.method = Method::parse(v)?,
            "seed" => self.seed = num(key, v)?,
            "updates" => self.updates = num(key, v)?,
            "train.lr" => self.lr = num(key, v)?,
            "train.lr_schedule" => self.lr_schedule = parse_schedule(v)?,
            "train.batch_labeled" => self.batch_labeled = num(key, v)?,
            "train.batch_unlabeled" => self.batch_unlabeled = num(key, v)?,
            "train.record_every" => self.record_every = num(key, v)?,
            "train.eval_every" => self.eval_every = num(key, v)?,
            "perturb.eps" => self.eps = num(key, v)?,
            "perturb.xi" => self.xi = num(key, v)?,
            "perturb.k" => self.k = num(key, v)?,
            "perturb.norm" => {
                self.norm = match v {
                    "l2" => Norm::L2,
                    "linf" => Norm::Linf,
                    _ => return Err(VatlabError::Config(format!("perturb.norm: expected l2 or linf, got `{}`", v))),
                }
            }
            "objective.alpha" => self.alpha = num(key, v)?,
            "objective.beta" => self.beta = num(key, v)?,
            "model.hidden" => self.hidden = list(key, v)?,
            "model.noise_sd" => self.noise_sd = num(key, v)?,
            "data.n_labeled" => self.n_labeled = num(key, v)?,
            "data.n_unlabeled" => self.n_unlabeled = num(key, v)?,
            "data.n_validation" => self.n_validation = num(key, v)?,
            "data.noise" => self.data_noise = num(key, v)?,
            "data.seed" => self.data_seed = if v == "auto" { None } else { Some(num(key, v)?) },
            "sweep.eps" => self.sweep_eps = list(key, v)?,
            "sdnorm.num_samples" => self.sdnorm_samples = num(key, v)?,
            "sdnorm.batch" => self.sdnorm_batch = num(key, v)?,
            "oracle.trials" => self.oracle_trials = num(key, v)?,
            "heatmap.resolution" => self.heatmap_res = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(VatlabError::Config(format!("unknown config key `{}`", key))),
        }
        Ok(())
    }

    /// Builds a config from ordered `(key, value)` layers, later layers
    /// winning. The task is resolved first so its defaults sit underneath.
    pub fn resolve(layers: &[Vec<(String, String)>]) -> Result<RunConfig> {
        let task = layers
            .iter()
            .rev()
            .find_map(|l| l.iter().rev().find(|(k, _)| k == "task"))
            .map(|(_, v)| Task::parse(v.trim()))
            .transpose()?
            .unwrap_or(Task::Synth2d);
        let mut cfg = RunConfig::defaults(task);
        for (k, v) in layers.iter().flatten() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.spec(1, 2).validate()?;
        if self.norm == Norm::Linf && self.method != Method::AdversarialLinf {
            return Err(VatlabError::Config(format!("perturb.norm = linf is only valid for adversarial_linf, not {}", self.method.name())));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(VatlabError::Config("objective.alpha and objective.beta must be >= 0".into()));
        }
        if !(0.0..=1e6).contains(&self.noise_sd) {
            return Err(VatlabError::Config(format!("model.noise_sd out of range: {}", self.noise_sd)));
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn perturb(&self) -> PerturbConfig {
        PerturbConfig { epsilon: self.eps, xi: self.xi, power_iterations: self.k, norm: self.norm }
    }

    /// The objective with method constraints applied (`rpt` forces `K = 0`).
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig { method: self.method, perturb: self.perturb(), alpha: self.alpha, beta: self.beta }.normalized()
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.objective(), self.updates);
        t.adam.lr = self.lr;
        t.lr_schedule = self.lr_schedule;
        t.batch_labeled = self.batch_labeled;
        t.batch_unlabeled = self.batch_unlabeled;
        t.record_every = self.record_every;
        t.eval_every = self.eval_every;
        t
    }

    pub fn spec(&self, input_dim: usize, classes: usize) -> ClassifierSpec {
        ClassifierSpec::new(input_dim, &self.hidden, classes).with_noise(self.noise_sd)
    }

    /// Every key with its effective value, in a form [`parse_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let obj = self.objective();
        let fmt_list = |v: &[f64]| v.iter().map(|e| format!("{:?}", e)).collect::<Vec<_>>().join(",");
        let lines: Vec<(&str, String)> = vec![
            ("task", self.task.name().into()),
            ("method", self.method.name().into()),
            ("seed", self.seed.to_string()),
            ("updates", self.updates.to_string()),
            ("train.lr", format!("{:?}", self.lr)),
            ("train.lr_schedule", schedule_text(&self.lr_schedule)),
            ("train.batch_labeled", self.batch_labeled.to_string()),
            ("train.batch_unlabeled", self.batch_unlabeled.to_string()),
            ("train.record_every", self.record_every.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("perturb.eps", format!("{:?}", self.eps)),
            ("perturb.xi", format!("{:?}", self.xi)),
            ("perturb.k", obj.perturb.power_iterations.to_string()),
            ("perturb.norm", if self.norm == Norm::Linf { "linf".into() } else { "l2".into() }),
            ("objective.alpha", format!("{:?}", self.alpha)),
            ("objective.beta", format!("{:?}", self.beta)),
            ("model.hidden", self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")),
            ("model.noise_sd", format!("{:?}", self.noise_sd)),
            ("data.n_labeled", self.n_labeled.to_string()),
            ("data.n_unlabeled", self.n_unlabeled.to_string()),
            ("data.n_validation", self.n_validation.to_string()),
            ("data.noise", format!("{:?}", self.data_noise)),
            ("data.seed", self.data_seed.map_or("auto".into(), |s| s.to_string())),
            ("sweep.eps", fmt_list(&self.sweep_eps)),
            ("sdnorm.num_samples", self.sdnorm_samples.to_string()),
            ("sdnorm.batch", self.sdnorm_batch.to_string()),
            ("oracle.trials", self.oracle_trials.to_string()),
            ("heatmap.resolution", self.heatmap_res.to_string()),
            ("out", self.out.display().to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{} = {}", k, v);
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.resolved");
        fs::write(&p, self.to_text()).map_err(VatlabError::io(&p))
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| VatlabError::Config(format!("{}: cannot parse `{}`", key, v)))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

/// `constant`, `exp_decay:RATE:EVERY` or `linear_decay:START`.
pub fn parse_schedule(v: &str) -> Result<LrSchedule> {
    let parts: Vec<&str> = v.split(':').collect();
    let key = "train.lr_schedule";
    match parts.as_slice() {
        ["constant"] => Ok(LrSchedule::Constant),
        ["exp_decay", rate, every] => Ok(LrSchedule::ExpDecay { rate: num(key, rate)?, every: num(key, every)? }),
        ["linear_decay", start] => Ok(LrSchedule::LinearDecay { start_update: num(key, start)? }),
        _ => Err(VatlabError::Config(format!(
            "{}: expected constant, exp_decay:RATE:EVERY or linear_decay:START, got `{}`",
            key, v
        ))),
    }
}

fn schedule_text(s: &LrSchedule) -> String {
    match s {
        LrSchedule::Constant => "constant".into(),
        LrSchedule::ExpDecay { rate, every } => format!("exp_decay:{:?}:{}", rate, every),
        LrSchedule::LinearDecay { start_update } => format!("linear_decay:{}", start_update),
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| VatlabError::Config(format!("line {}: expected `key = value`, got `{}`", i + 1, raw.trim())))?;
        let k = k.trim();
        if !RunConfig::KEYS.contains(&k) {
            return Err(VatlabError::Config(format!("line {}: unknown config key `{}`", i + 1, k)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| VatlabError::Config(format!("{}: {}", path.display(), e)))?;
    parse_text(&text)
}

/// Splits a `--set key=value` argument.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| VatlabError::Config(format!("--set expects key=value, got `{}`", s)))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
