//! Run configuration.
//!
//! Configs are flat `key = value` text with `#` comments; nested keys are
//! dotted (`task.heterogeneity`). Values are applied in order: a `preset`
//! first, then every other key in the order given. Unknown keys are rejected
//! by name.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::consensus::ConsensusMode;
use crate::error::{Error, Result};
use crate::lowrank::SplitMode;
use crate::objective::TaskSpec;
use crate::optimizer::{AdamHt, OptHyper, OptimizerKind};
use crate::topology::TopologyKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Local,
    LocalFa,
    Fedavg,
    FedavgFa,
    Dlora,
    DloraFa,
    Decaf,
}

impl Algorithm {
    pub fn consensus_mode(self) -> ConsensusMode {
        match self {
            Self::Local | Self::LocalFa => ConsensusMode::None,
            Self::Fedavg | Self::Dlora => ConsensusMode::Individual,
            Self::FedavgFa | Self::DloraFa => ConsensusMode::FrozenA,
            Self::Decaf => ConsensusMode::ProductTsvd,
        }
    }

    /// Variants that train only `B` on top of a shared frozen `A₀`.
    pub fn freezes_a(self) -> bool {
        matches!(self, Self::LocalFa | Self::FedavgFa | Self::DloraFa)
    }

    /// Server averaging is modelled as uniform all-to-all mixing.
    pub fn forces_fully_connected(self) -> bool {
        matches!(self, Self::Fedavg | Self::FedavgFa)
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Self::Local),
            "local_fa" => Ok(Self::LocalFa),
            "fedavg" => Ok(Self::Fedavg),
            "fedavg_fa" => Ok(Self::FedavgFa),
            "dlora" => Ok(Self::Dlora),
            "dlora_fa" => Ok(Self::DloraFa),
            "decaf" => Ok(Self::Decaf),
            other => Err(Error::Parse(format!(
                "unknown algorithm {other:?} (expected local|local_fa|fedavg|fedavg_fa|dlora|dlora_fa|decaf)"
            ))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::LocalFa => "local_fa",
            Self::Fedavg => "fedavg",
            Self::FedavgFa => "fedavg_fa",
            Self::Dlora => "dlora",
            Self::DloraFa => "dlora_fa",
            Self::Decaf => "decaf",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Constant,
    /// `α_t = α·½(1 + cos(π(t−1)/T))`.
    Cosine,
}

impl Schedule {
    /// Step size at 1-based iteration `t` of `iters`.
    pub fn at(self, alpha: f64, t: u64, iters: u64) -> f64 {
        match self {
            Self::Constant => alpha,
            Self::Cosine => {
                let frac = (t - 1) as f64 / iters as f64;
                alpha * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Parse(format!(
                "unknown schedule {other:?} (expected constant|cosine)"
            ))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

/// Where the local gradient is evaluated relative to the merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradPoint {
    /// At the state before this iteration's merge (the gradient is computed
    /// first, then applied to the merged state).
    #[default]
    PreConsensus,
    PostConsensus,
}

impl FromStr for GradPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_consensus" => Ok(Self::PreConsensus),
            "post_consensus" => Ok(Self::PostConsensus),
            other => Err(Error::Parse(format!(
                "unknown grad_point {other:?} (expected pre_consensus|post_consensus)"
            ))),
        }
    }
}

impl fmt::Display for GradPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PreConsensus => "pre_consensus",
            Self::PostConsensus => "post_consensus",
        })
    }
}

/// Keys accepted by [`RunConfig::sweep_key`].
pub const SWEEP_AXES: &[&str] = &["r", "topology", "n_agents", "tau", "alpha", "heterogeneity"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub algorithm: Algorithm,
    pub optimizer: OptimizerKind,
    pub topology: TopologyKind,
    pub n_agents: usize,
    /// Explicit torus grid; both or neither must be set.
    pub torus_rows: Option<usize>,
    pub torus_cols: Option<usize>,
    /// CSV mixing matrix for `topology = custom`.
    pub topology_file: Option<PathBuf>,
    pub task: TaskSpec,
    pub r: usize,
    pub eta: f64,
    pub sigma_init: f64,
    pub alpha: f64,
    pub schedule: Schedule,
    pub tau: u64,
    pub iters: u64,
    pub seed: u64,
    pub metric_interval: u64,
    pub split_mode: SplitMode,
    pub grad_point: GradPoint,
    pub batch_size: usize,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub adam_ht: AdamHt,
    /// Random probe points used when estimating constants.
    pub n_probes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hyper = OptHyper::default();
        Self {
            preset: None,
            algorithm: Algorithm::Decaf,
            optimizer: OptimizerKind::Sgd,
            topology: TopologyKind::FullyConnected,
            n_agents: 8,
            torus_rows: None,
            torus_cols: None,
            topology_file: None,
            task: TaskSpec::default(),
            r: 4,
            eta: 1.0,
            sigma_init: 0.02,
            alpha: 0.05,
            schedule: Schedule::Constant,
            tau: 1,
            iters: 1000,
            seed: 0,
            metric_interval: 10,
            split_mode: SplitMode::Balanced,
            grad_point: GradPoint::PreConsensus,
            batch_size: 16,
            beta: hyper.beta,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            epsilon: hyper.epsilon,
            adam_ht: hyper.adam_ht,
            n_probes: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

impl RunConfig {
    /// Applies a named preset: `vlm-like` (r = 2, η = 1) or `llm-like`
    /// (r = 4, η = 8).
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "vlm-like" => {
                self.r = 2;
                self.eta = 1.0;
            }
            "llm-like" => {
                self.r = 4;
                self.eta = 8.0;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected vlm-like|llm-like)"
                )))
            }
        }
        self.preset = Some(name.to_string());
        Ok(())
    }

    /// Sets one key. Presets are applied immediately; prefer
    /// [`RunConfig::from_pairs`] for ordered application.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "preset" => self.apply_preset(v)?,
            "algorithm" => self.algorithm = parse(key, v)?,
            "optimizer" => self.optimizer = parse(key, v)?,
            "topology" => self.topology = parse(key, v)?,
            "n_agents" => self.n_agents = parse(key, v)?,
            "topology.rows" => self.torus_rows = Some(parse(key, v)?),
            "topology.cols" => self.torus_cols = Some(parse(key, v)?),
            "topology.file" => self.topology_file = Some(PathBuf::from(v)),
            "r" => self.r = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "sigma_init" => self.sigma_init = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "schedule" => self.schedule = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "iters" => self.iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "metric_interval" => self.metric_interval = parse(key, v)?,
            "split_mode" => self.split_mode = parse(key, v)?,
            "grad_point" => self.grad_point = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "adam_ht" => self.adam_ht = parse(key, v)?,
            "n_probes" => self.n_probes = parse(key, v)?,
            "task.d" => self.task.d = parse(key, v)?,
            "task.k" => self.task.k = parse(key, v)?,
            "task.n_samples" => self.task.n_samples = parse(key, v)?,
            "task.heterogeneity" => self.task.heterogeneity = parse(key, v)?,
            "task.noise_std" => self.task.noise_std = parse(key, v)?,
            "task.ground_truth_rank" => self.task.ground_truth_rank = parse(key, v)?,
            "task.signal_norm" => self.task.signal_norm = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Builds a config from ordered pairs: the last `preset` first, then the
    /// remaining keys in order.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some((_, preset)) = pairs.iter().rev().find(|(k, _)| k.as_ref().trim() == "preset") {
            cfg.apply_preset(preset.as_ref().trim())?;
        }
        for (k, v) in pairs {
            if k.as_ref().trim() != "preset" {
                cfg.set(k.as_ref(), v.as_ref())?;
            }
        }
        Ok(cfg)
    }

    /// Sets a sweep axis; `heterogeneity` maps to `task.heterogeneity`.
    pub fn sweep_key(axis: &str) -> Result<&'static str> {
        match axis {
            "r" => Ok("r"),
            "topology" => Ok("topology"),
            "n_agents" => Ok("n_agents"),
            "tau" => Ok("tau"),
            "alpha" => Ok("alpha"),
            "heterogeneity" | "task.heterogeneity" => Ok("task.heterogeneity"),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected one of {})",
                SWEEP_AXES.join(", ")
            ))),
        }
    }

    pub fn hyper(&self) -> OptHyper {
        OptHyper {
            kind: self.optimizer,
            beta: self.beta,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            adam_ht: self.adam_ht,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.hyper().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_agents == 0 {
            return bad("n_agents must be at least 1".into());
        }
        if self.r == 0 || self.r > self.task.d.min(self.task.k) {
            return bad(format!(
                "r must lie in 1..={} for d={}, k={}, got {}",
                self.task.d.min(self.task.k),
                self.task.d,
                self.task.k,
                self.r
            ));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.sigma_init.is_finite() && self.sigma_init >= 0.0) {
            return bad(format!("sigma_init must be nonnegative, got {}", self.sigma_init));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.tau == 0 {
            return bad("tau must be at least 1".into());
        }
        if self.iters == 0 {
            return bad("iters must be at least 1".into());
        }
        if self.metric_interval == 0 {
            return bad("metric_interval must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size > self.task.n_samples {
            return bad(format!(
                "batch_size must lie in 1..={}, got {}",
                self.task.n_samples, self.batch_size
            ));
        }
        if self.n_probes < 2 {
            return bad(format!("n_probes must be at least 2, got {}", self.n_probes));
        }
        match (self.torus_rows, self.torus_cols) {
            (Some(rows), Some(cols)) if rows * cols != self.n_agents => {
                return bad(format!(
                    "torus grid {rows}x{cols} does not match n_agents = {}",
                    self.n_agents
                ));
            }
            (Some(_), None) | (None, Some(_)) => {
                return bad("topology.rows and topology.cols must be set together".into());
            }
            _ => {}
        }
        if self.topology == TopologyKind::Custom && self.topology_file.is_none() {
            return bad("topology = custom requires topology.file".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(&str, String)> = Vec::new();
        if let Some(preset) = &self.preset {
            out.push(("preset", preset.clone()));
        }
        out.extend([
            ("algorithm", self.algorithm.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("topology", self.topology.to_string()),
            ("n_agents", self.n_agents.to_string()),
        ]);
        if let (Some(rows), Some(cols)) = (self.torus_rows, self.torus_cols) {
            out.push(("topology.rows", rows.to_string()));
            out.push(("topology.cols", cols.to_string()));
        }
        if let Some(file) = &self.topology_file {
            out.push(("topology.file", file.display().to_string()));
        }
        out.extend([
            ("r", self.r.to_string()),
            ("eta", format!("{:?}", self.eta)),
            ("sigma_init", format!("{:?}", self.sigma_init)),
            ("alpha", format!("{:?}", self.alpha)),
            ("schedule", self.schedule.to_string()),
            ("tau", self.tau.to_string()),
            ("iters", self.iters.to_string()),
            ("seed", self.seed.to_string()),
            ("metric_interval", self.metric_interval.to_string()),
            ("split_mode", self.split_mode.to_string()),
            ("grad_point", self.grad_point.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta", format!("{:?}", self.beta)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("epsilon", format!("{:?}", self.epsilon)),
            ("adam_ht", self.adam_ht.to_string()),
            ("n_probes", self.n_probes.to_string()),
            ("task.d", self.task.d.to_string()),
            ("task.k", self.task.k.to_string()),
            ("task.n_samples", self.task.n_samples.to_string()),
            ("task.heterogeneity", format!("{:?}", self.task.heterogeneity)),
            ("task.noise_std", format!("{:?}", self.task.noise_std)),
            ("task.ground_truth_rank", self.task.ground_truth_rank.to_string()),
            ("task.signal_norm", format!("{:?}", self.task.signal_norm)),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected `key = value`, got {raw:?}", no + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", no + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Parse(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
