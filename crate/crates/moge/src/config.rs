//! Run configuration for training and evaluation commands.
//!
//! A JSON object with flat keys. Unknown keys are rejected and every
//! missing key takes the default of the reference Fashion-MNIST setup:
//! 400 experts, top-1 routing, a 3x3 filter at fixed sigma 2, lambda 4e-3,
//! 150 epochs of batch 200.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::group_reg::{near_square_shape, SigmaSchedule, DEFAULT_EPS};
use crate::model::{Activation, AdamWConfig, ModelDims};
use crate::router::{RouterConfig, RoutingMode};
use crate::{Error, Result};

pub const DATA_DIR_ENV: &str = "MOGE_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/fashion-mnist";
pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 4e-3;
pub const DEFAULT_SNAPSHOTS: [usize; 3] = [50, 100, 150];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Plain mixture of experts, no regularizer.
    Moe,
    /// Mixture of group experts.
    Moge,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Moe => "moe",
            ModelKind::Moge => "moge",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(ModelKind::Moe),
            "moge" => Ok(ModelKind::Moge),
            other => Err(Error::config(format!("model must be moe or moge, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub n_experts: usize,
    pub k: usize,
    pub routing_mode: RoutingMode,
    pub hidden: usize,
    pub activation: String,
    pub lambda: f64,
    pub lb_weight: f64,
    pub filter_size: usize,
    /// Fixed filter width; mutually exclusive with the schedule triple.
    pub sigma: Option<f64>,
    pub sigma0: Option<f64>,
    pub sigma_min: Option<f64>,
    pub gamma: Option<f64>,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub init_std: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Use only the first N training / test items.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Epochs after which a checkpoint is written. The final epoch is
    /// always written.
    pub epoch_snapshots: Option<Vec<usize>>,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            model: ModelKind::Moge,
            n_experts: 400,
            k: 1,
            routing_mode: RoutingMode::SoftmaxFirst,
            hidden: 64,
            activation: Activation::Relu.name().to_string(),
            lambda: DEFAULT_LAMBDA,
            lb_weight: 0.0,
            filter_size: 3,
            sigma: None,
            sigma0: None,
            sigma_min: None,
            gamma: None,
            eps: DEFAULT_EPS,
            epochs: 150,
            batch_size: 200,
            base_lr: adam.base_lr,
            warmup_epochs: adam.warmup_epochs,
            weight_decay: adam.weight_decay,
            init_std: 0.02,
            seed: 0,
            shuffle: true,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            train_subset: None,
            test_subset: None,
            epoch_snapshots: None,
            threads: None,
        }
    }
}

/// The filter width over training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPlan {
    Fixed(f64),
    Schedule { sigma0: f64, sigma_min: f64, gamma: f64 },
}

impl SigmaPlan {
    pub fn schedule(self, total_iters: u64) -> Result<SigmaSchedule> {
        match self {
            SigmaPlan::Fixed(s) => SigmaSchedule::constant(s, total_iters),
            SigmaPlan::Schedule { sigma0, sigma_min, gamma } => {
                SigmaSchedule::new(sigma0, sigma_min, gamma, total_iters)
            }
        }
    }
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(format!("field `{name}`: {msg}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Switches the model family, keeping lambda consistent with it.
    pub fn with_model(mut self, kind: ModelKind) -> Self {
        self.model = kind;
        match kind {
            ModelKind::Moe => self.lambda = 0.0,
            ModelKind::Moge if self.lambda == 0.0 => self.lambda = DEFAULT_LAMBDA,
            ModelKind::Moge => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.router()?;
        if self.hidden == 0 {
            return Err(field("hidden", "must be positive"));
        }
        Activation::from_name(&self.activation).map_err(|e| field("activation", e))?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(field("lambda", format!("must be a finite value >= 0, got {}", self.lambda)));
        }
        match (self.model, self.lambda == 0.0) {
            (ModelKind::Moe, false) => return Err(field("lambda", "must be 0 for model moe")),
            (ModelKind::Moge, true) => return Err(field("lambda", "must be positive for model moge")),
            _ => {}
        }
        if !(self.lb_weight >= 0.0) || !self.lb_weight.is_finite() {
            return Err(field("lb_weight", format!("must be a finite value >= 0, got {}", self.lb_weight)));
        }
        if self.filter_size == 0 || self.filter_size % 2 == 0 {
            return Err(field("filter_size", format!("must be odd, got {}", self.filter_size)));
        }
        let (r, c) = near_square_shape(self.n_experts);
        if self.model == ModelKind::Moge && self.filter_size > r.min(c) {
            return Err(field(
                "filter_size",
                format!("{0}x{0} filter does not fit the {r}x{c} map of {1} experts", self.filter_size, self.n_experts),
            ));
        }
        self.sigma_plan()?.schedule(1)?;
        if !(self.eps > 0.0) {
            return Err(field("eps", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(field("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be positive"));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(field("base_lr", "must be positive"));
        }
        if !(self.warmup_epochs >= 0.0) || !self.warmup_epochs.is_finite() {
            return Err(field("warmup_epochs", "must be a finite value >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(field("weight_decay", "must be >= 0"));
        }
        if !(self.init_std > 0.0) {
            return Err(field("init_std", "must be positive"));
        }
        if self.train_subset == Some(0) {
            return Err(field("train_subset", "must be positive"));
        }
        if self.test_subset == Some(0) {
            return Err(field("test_subset", "must be positive"));
        }
        if let Some(s) = &self.epoch_snapshots {
            if let Some(bad) = s.iter().find(|&&e| e == 0 || e > self.epochs) {
                return Err(field("epoch_snapshots", format!("epoch {bad} outside 1..={}", self.epochs)));
            }
        }
        if self.threads == Some(0) {
            return Err(field("threads", "must be positive"));
        }
        Ok(())
    }

    pub fn router(&self) -> Result<RouterConfig> {
        RouterConfig::new(self.n_experts, self.k, self.routing_mode).map_err(|e| field("k", e))
    }

    pub fn dims(&self, input: usize, classes: usize) -> ModelDims {
        ModelDims { input, hidden: self.hidden, output: input, classes }
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::from_name(&self.activation)
    }

    pub fn sigma_plan(&self) -> Result<SigmaPlan> {
        let triple = [self.sigma0, self.sigma_min, self.gamma];
        match (self.sigma, triple) {
            (Some(_), t) if t.iter().any(Option::is_some) => Err(field(
                "sigma",
                "give either a fixed sigma or sigma0/sigma_min/gamma, not both",
            )),
            (Some(s), _) => Ok(SigmaPlan::Fixed(s)),
            (None, [Some(sigma0), Some(sigma_min), Some(gamma)]) => Ok(SigmaPlan::Schedule { sigma0, sigma_min, gamma }),
            (None, [None, None, None]) => Ok(SigmaPlan::Fixed(DEFAULT_SIGMA)),
            (None, _) => Err(field("sigma0", "sigma0, sigma_min and gamma must be given together")),
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            total_epochs: self.epochs as f64,
            ..AdamWConfig::default()
        }
    }

    /// Checkpoint epochs, sorted, always including the last one.
    pub fn snapshots(&self) -> Vec<usize> {
        let mut s: Vec<usize> = match &self.epoch_snapshots {
            Some(v) => v.clone(),
            None => DEFAULT_SNAPSHOTS.iter().copied().filter(|&e| e <= self.epochs).collect(),
        };
        s.push(self.epochs);
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Dataset directory: the config value, then `$MOGE_DATA_DIR`, then
    /// `data/fashion-mnist`.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }
}
