//! Experiment configuration files (TOML, strict).

use std::path::{Path, PathBuf};

use lori_core::suite::{SuiteConfig, Variant};
use lori_core::{Granularity, MergeMethod, ModelConfig, OptimizerKind, SparsityConfig, TaskKind, TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: impl Into<String>, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub width: usize,
    pub ffn_width: Option<usize>,
    pub seq_len: usize,
    pub out_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { layers: 2, width: 32, ffn_width: None, seq_len: 8, out_dim: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: String,
    pub id: u64,
    #[serde(default = "default_task_size")]
    pub size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_task_size() -> usize {
    256
}

fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsitySection {
    pub ratio: f64,
    pub granularity: String,
    pub calibration_steps: Option<usize>,
}

impl Default for SparsitySection {
    fn default() -> Self {
        Self { ratio: 0.9, granularity: "model".into(), calibration_steps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: String,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } = OptimizerKind::adamw() else { unreachable!() };
        Self { optimizer: "adamw".into(), lr: t.lr, steps: t.steps, batch_size: t.batch_size, beta1, beta2, eps, weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub methods: Vec<String>,
    /// Empty means each variant's default weight.
    pub weights: Vec<f64>,
    pub density: f64,
    pub variants: Vec<String>,
}

impl Default for MergeSection {
    fn default() -> Self {
        Self {
            methods: MergeMethod::ALL.iter().map(|m| m.to_string()).collect(),
            weights: Vec::new(),
            density: 0.5,
            variants: Variant::ALL.iter().map(|v| v.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sparsities: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { sparsities: vec![0.0, 0.5, 0.9, 0.95] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoSection {
    pub rank: usize,
    pub d_in: usize,
    pub delta: f64,
    pub trials: usize,
    pub sweep_d_in: Vec<usize>,
    pub sweep_trials: usize,
}

impl Default for OrthoSection {
    fn default() -> Self {
        Self { rank: 16, d_in: 1024, delta: 0.05, trials: 200, sweep_d_in: vec![256, 1024, 4096], sweep_trials: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSection {
    /// Index into `tasks` of the phase-1 task.
    pub phase1: usize,
    pub rezero_overlap: bool,
    pub variants: Vec<String>,
}

impl Default for ContinualSection {
    fn default() -> Self {
        Self { phase1: 0, rezero_overlap: false, variants: Variant::ALL.iter().map(|v| v.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub rank: usize,
    pub alpha: Option<f64>,
    pub model: ModelSection,
    pub tasks: Vec<TaskSection>,
    pub sparsity: SparsitySection,
    pub train: TrainSection,
    pub merge: MergeSection,
    pub eval: EvalSection,
    pub ortho: OrthoSection,
    pub continual: ContinualSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let kinds = [TaskKind::LinearRegression, TaskKind::ClusterClassification, TaskKind::SequenceCopy];
        Self {
            seeds: vec![0],
            out: None,
            rank: 8,
            alpha: None,
            model: ModelSection::default(),
            tasks: kinds
                .iter()
                .enumerate()
                .map(|(i, k)| TaskSection { kind: k.to_string(), id: i as u64, size: 256, noise: 0.1 })
                .collect(),
            sparsity: SparsitySection::default(),
            train: TrainSection::default(),
            merge: MergeSection::default(),
            eval: EvalSection::default(),
            ortho: OrthoSection::default(),
            continual: ContinualSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text)
    }

    /// Canonical TOML form; equal configs serialize identically.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed required"));
        }
        if self.tasks.is_empty() {
            return Err(invalid("tasks", "at least one task required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.kind.parse::<TaskKind>().map_err(|e| invalid(format!("tasks[{i}].kind"), e))?;
        }
        self.sparsity.granularity.parse::<Granularity>().map_err(|e| invalid("sparsity.granularity", e))?;
        self.optimizer()?;
        self.merge_methods()?;
        self.merge_variants()?;
        self.continual_variants()?;
        if !(self.merge.density > 0.0 && self.merge.density <= 1.0) {
            return Err(invalid("merge.density", format!("must be in (0, 1], got {}", self.merge.density)));
        }
        if !self.merge.weights.is_empty() && self.merge.weights.len() != self.tasks.len() {
            return Err(invalid(
                "merge.weights",
                format!("{} weights for {} tasks", self.merge.weights.len(), self.tasks.len()),
            ));
        }
        if !(0.0..1.0).contains(&self.sparsity.ratio) {
            return Err(invalid("sparsity.ratio", format!("must be in [0, 1), got {}", self.sparsity.ratio)));
        }
        if self.sparsity.calibration_steps == Some(0) {
            return Err(invalid("sparsity.calibration_steps", "must be positive"));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(invalid("train.lr", format!("must be positive, got {}", self.train.lr)));
        }
        for (key, v) in [("train.steps", self.train.steps), ("train.batch_size", self.train.batch_size), ("rank", self.rank)] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.rank > self.model.width {
            return Err(invalid("rank", format!("{} exceeds model.width = {}", self.rank, self.model.width)));
        }
        if let Some(s) = self.eval.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(invalid("eval.sparsities", format!("{s} outside [0, 1)")));
        }
        if self.continual.phase1 >= self.tasks.len() {
            return Err(invalid("continual.phase1", format!("no task at index {}", self.continual.phase1)));
        }
        // Remaining range checks live in the core; report them against the whole suite.
        self.suite(self.seeds[0]).validate().map_err(|e| invalid("suite", e))?;
        Ok(())
    }

    fn optimizer(&self) -> Result<OptimizerKind, ConfigError> {
        let t = &self.train;
        match t.optimizer.as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW { beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay }),
            other => Err(invalid("train.optimizer", format!("unknown optimizer `{other}` (expected sgd or adamw)"))),
        }
    }

    pub fn merge_methods(&self) -> Result<Vec<MergeMethod>, ConfigError> {
        self.merge.methods.iter().map(|m| m.parse().map_err(|e| invalid("merge.methods", e))).collect()
    }

    pub fn merge_variants(&self) -> Result<Vec<Variant>, ConfigError> {
        parse_variants(&self.merge.variants, "merge.variants")
    }

    pub fn continual_variants(&self) -> Result<Vec<Variant>, ConfigError> {
        parse_variants(&self.continual.variants, "continual.variants")
    }

    /// Core experiment configuration for one seed.
    pub fn suite(&self, seed: u64) -> SuiteConfig {
        let m = &self.model;
        SuiteConfig {
            model: ModelConfig {
                layers: m.layers,
                width: m.width,
                ffn_width: m.ffn_width.unwrap_or(2 * m.width),
                seq_len: m.seq_len,
                out_dim: m.out_dim,
                seed,
            },
            rank: self.rank,
            alpha: self.alpha,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskSpec::new(t.kind.parse().unwrap_or(TaskKind::LinearRegression), t.size, t.noise, seed, t.id))
                .collect(),
            train: TrainConfig {
                lr: self.train.lr,
                steps: self.train.steps,
                batch_size: self.train.batch_size,
                optimizer: self.optimizer().unwrap_or(OptimizerKind::Sgd),
                seed,
            },
            sparsity: SparsityConfig {
                sparsity: self.sparsity.ratio,
                granularity: self.sparsity.granularity.parse().unwrap_or(Granularity::Model),
                calibration_steps: self.sparsity.calibration_steps,
            },
        }
    }
}

fn parse_variants(names: &[String], key: &str) -> Result<Vec<Variant>, ConfigError> {
    names
        .iter()
        .map(|n| {
            Variant::ALL
                .into_iter()
                .find(|v| v.name() == n)
                .ok_or_else(|| invalid(key, format!("unknown variant `{n}` (expected lora, lori-d or lori-s)")))
        })
        .collect()
}
