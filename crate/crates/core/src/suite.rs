//! Desk-scale experiment drivers shared by the CLI and the acceptance suite.

use alloc::vec::Vec;

use crate::adapter::{default_alpha, init_lora_set, init_lori_set, init_lori_set_shared, LoraAdapter, LoriAdapter, LowRank};
use crate::calibrate::{calibrate, mask_set_overlap, Granularity, MaskSet, SparsityConfig};
use crate::continual::{forgetting_report, two_phase, two_phase_lora, ContinualConfig, ForgettingRow};
use crate::error::{Error, Result};
use crate::merge::{interference, merge, MergeMethod, MergeSpec};
use crate::model::{ModelConfig, ToyModel};
use crate::task::{gen_task, TaskDataset, TaskKind, TaskSpec};
use crate::train::{evaluate, evaluate_weights, train, TrainConfig};

/// Which adapter family an experiment row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Lora,
    LoriDense,
    LoriSparse,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Lora, Variant::LoriDense, Variant::LoriSparse];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::LoriDense => "lori-d",
            Variant::LoriSparse => "lori-s",
        }
    }

    /// Default concatenated-merge weight per adapter.
    pub fn default_merge_weight(self) -> f64 {
        match self {
            Variant::LoriSparse => 0.3,
            _ => 0.4,
        }
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything one experiment run needs besides its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub model: ModelConfig,
    pub rank: usize,
    /// `None` means `2 · rank`.
    pub alpha: Option<f64>,
    pub tasks: Vec<TaskSpec>,
    pub train: TrainConfig,
    pub sparsity: SparsityConfig,
}

impl SuiteConfig {
    /// Two layers, width 32, rank 8, one task of each kind with 256 sequences, s = 0.9.
    pub fn reference(seed: u64) -> Self {
        Self {
            model: ModelConfig::new(2, 32, 8, seed),
            rank: 8,
            alpha: None,
            tasks: reference_tasks(seed, 256),
            train: TrainConfig { seed, ..TrainConfig::default() },
            sparsity: SparsityConfig::new(0.9, Granularity::Model),
        }
    }

    /// Same configuration with every seed replaced.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.model.seed = seed;
        out.train.seed = seed;
        for t in &mut out.tasks {
            t.seed = seed;
        }
        out
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(self.rank))
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::arg("at least one task required"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.task_id == t.task_id) {
                return Err(Error::arg(alloc::format!("duplicate task id {}", t.task_id)));
            }
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() {
                return Err(Error::arg("alpha must be finite"));
            }
        }
        self.train.validate()?;
        self.sparsity.validate()
    }

    pub fn build(&self) -> Result<(ToyModel, Vec<TaskDataset>)> {
        self.validate()?;
        let model = ToyModel::build(self.model)?;
        let datasets = self.tasks.iter().map(|t| gen_task(t, &model)).collect::<Result<Vec<_>>>()?;
        Ok((model, datasets))
    }
}

/// One task of each kind, ids 0, 1, 2, noise 0.1.
pub fn reference_tasks(seed: u64, size: usize) -> Vec<TaskSpec> {
    [TaskKind::LinearRegression, TaskKind::ClusterClassification, TaskKind::SequenceCopy]
        .into_iter()
        .enumerate()
        .map(|(i, kind)| TaskSpec::new(kind, size, 0.1, seed, i as u64))
        .collect()
}

/// Higher-is-better score: accuracy for classification, `1 - L / L_base` otherwise.
pub fn task_metric<T: LowRank>(model: &ToyModel, adapters: &[T], dataset: &TaskDataset) -> Result<f64> {
    let m = evaluate(model, adapters, dataset)?;
    match m.accuracy {
        Some(acc) => Ok(acc),
        None => {
            let base = evaluate_weights(model, model.base_weights(), dataset)?.loss;
            Ok(1.0 - m.loss / base)
        }
    }
}

/// LoRI adapters for one task: calibrated at `sparsity` (skipped when it is zero), then trained.
pub fn train_lori_task(
    model: &ToyModel,
    cfg: &SuiteConfig,
    dataset: &TaskDataset,
    sparsity: f64,
) -> Result<(Vec<LoriAdapter>, Option<MaskSet>)> {
    let mut adapters = init_lori_set(model, cfg.rank, cfg.alpha(), dataset.task_id, cfg.seed())?;
    let masks = if sparsity > 0.0 {
        let sp = SparsityConfig { sparsity, ..cfg.sparsity };
        Some(calibrate(model, &mut adapters, dataset, &sp, &cfg.train)?)
    } else {
        None
    };
    train(model, &mut adapters, dataset, &cfg.train)?;
    Ok((adapters, masks))
}

pub fn train_lora_task(model: &ToyModel, cfg: &SuiteConfig, dataset: &TaskDataset) -> Result<Vec<LoraAdapter>> {
    let mut adapters = init_lora_set(model, cfg.rank, cfg.alpha(), dataset.task_id, cfg.seed())?;
    train(model, &mut adapters, dataset, &cfg.train)?;
    Ok(adapters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub task_id: u64,
    pub kind: Option<TaskKind>,
    pub sparsity: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub metric: f64,
    /// Fraction of `B` entries allowed to train.
    pub retained: f64,
}

/// Trains every task at every sparsity level; one row per (task, sparsity).
pub fn sparsity_sweep(cfg: &SuiteConfig, sparsities: &[f64]) -> Result<Vec<SweepRow>> {
    let (model, datasets) = cfg.build()?;
    let mut rows = Vec::with_capacity(datasets.len() * sparsities.len());
    for ds in &datasets {
        for &s in sparsities {
            let (adapters, masks) = train_lori_task(&model, cfg, ds, s)?;
            let m = evaluate(&model, &adapters, ds)?;
            rows.push(SweepRow {
                task_id: ds.task_id,
                kind: ds.kind,
                sparsity: s,
                loss: m.loss,
                accuracy: m.accuracy,
                metric: task_metric(&model, &adapters, ds)?,
                retained: masks.map_or(1.0, |m| m.retained() as f64 / m.total() as f64),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceRow {
    pub variant: Variant,
    pub method: MergeMethod,
    pub task_id: u64,
    pub single_loss: f64,
    pub merged_loss: f64,
    pub interference: f64,
}

/// Merge settings shared by every variant; `weights: None` uses each variant's default.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeSettings {
    pub methods: Vec<MergeMethod>,
    pub weights: Option<Vec<f64>>,
    pub density: f64,
}

impl Default for MergeSettings {
    fn default() -> Self {
        Self { methods: MergeMethod::ALL.to_vec(), weights: None, density: 0.5 }
    }
}

fn interference_rows<T: LowRank>(
    model: &ToyModel,
    variant: Variant,
    adapters: &[Vec<T>],
    datasets: &[TaskDataset],
    settings: &MergeSettings,
    seed: u64,
) -> Result<Vec<InterferenceRow>> {
    let sets: Vec<&[T]> = adapters.iter().map(|a| a.as_slice()).collect();
    let weights = match &settings.weights {
        Some(w) if w.len() != sets.len() => {
            return Err(Error::arg(alloc::format!("{} merge weights for {} tasks", w.len(), sets.len())))
        }
        Some(w) => w.clone(),
        None => alloc::vec![variant.default_merge_weight(); sets.len()],
    };
    let mut rows = Vec::new();
    for &method in &settings.methods {
        let spec = MergeSpec { method, weights: weights.clone(), density: settings.density, seed };
        let merged = merge(model.base_weights(), &sets, &spec)?;
        let report = interference(model, &merged, &sets, datasets, &weights)?;
        rows.extend(report.tasks.into_iter().map(|t| InterferenceRow {
            variant,
            method,
            task_id: t.task_id,
            single_loss: t.single_loss,
            merged_loss: t.merged_loss,
            interference: t.interference,
        }));
    }
    Ok(rows)
}

/// Trains one adapter per task and variant, merges each variant's adapters with
/// every requested method and reports `I_t`.
pub fn interference_experiment(
    cfg: &SuiteConfig,
    variants: &[Variant],
    settings: &MergeSettings,
) -> Result<Vec<InterferenceRow>> {
    let (model, datasets) = cfg.build()?;
    let mut rows = Vec::new();
    for &variant in variants {
        let block = match variant {
            Variant::Lora => {
                let sets = datasets.iter().map(|d| train_lora_task(&model, cfg, d)).collect::<Result<Vec<_>>>()?;
                interference_rows(&model, variant, &sets, &datasets, settings, cfg.seed())?
            }
            Variant::LoriDense | Variant::LoriSparse => {
                let s = if variant == Variant::LoriSparse { cfg.sparsity.sparsity } else { 0.0 };
                let sets = datasets
                    .iter()
                    .map(|d| train_lori_task(&model, cfg, d, s).map(|(a, _)| a))
                    .collect::<Result<Vec<_>>>()?;
                interference_rows(&model, variant, &sets, &datasets, settings, cfg.seed())?
            }
        };
        rows.extend(block);
    }
    Ok(rows)
}

/// Mean `I_t` of one (variant, method) block.
pub fn mean_interference(rows: &[InterferenceRow], variant: Variant, method: MergeMethod) -> Option<f64> {
    let sel: Vec<f64> =
        rows.iter().filter(|r| r.variant == variant && r.method == method).map(|r| r.interference).collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingResult {
    pub variant: Variant,
    pub phase1_before: f64,
    pub rows: Vec<ForgettingRow>,
}

impl ForgettingResult {
    pub fn mean_delta_loss(&self) -> f64 {
        self.rows.iter().map(|r| r.delta_loss).sum::<f64>() / self.rows.len() as f64
    }
}

/// Calibrates every task's mask against the projections shared by the run.
pub fn calibrate_shared_masks(
    model: &ToyModel,
    cfg: &SuiteConfig,
    datasets: &[TaskDataset],
    stream_task: u64,
    sparsity: f64,
) -> Result<Vec<MaskSet>> {
    let sp = SparsityConfig { sparsity, ..cfg.sparsity };
    datasets
        .iter()
        .map(|d| {
            let mut ads = init_lori_set_shared(model, cfg.rank, cfg.alpha(), stream_task, d.task_id, cfg.seed())?;
            calibrate(model, &mut ads, d, &sp, &cfg.train)
        })
        .collect()
}

/// Two-phase runs with `tasks[phase1]` first and the remaining tasks in phase 2,
/// with identical step budgets for every variant.
pub fn forgetting_experiment(
    cfg: &SuiteConfig,
    phase1: usize,
    variants: &[Variant],
    rezero_overlap: bool,
) -> Result<Vec<ForgettingResult>> {
    let (model, datasets) = cfg.build()?;
    if phase1 >= datasets.len() || datasets.len() < 2 {
        return Err(Error::arg("forgetting needs a valid phase-1 task and at least one other task"));
    }
    let first = datasets[phase1].clone();
    let rest: Vec<TaskDataset> =
        datasets.iter().enumerate().filter(|&(i, _)| i != phase1).map(|(_, d)| d.clone()).collect();
    let ccfg = ContinualConfig { phase1: cfg.train, phase2: cfg.train, rezero_overlap };
    let stream_task = first.task_id;
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (before, rows) = match variant {
            Variant::Lora => {
                let init = init_lora_set(&model, cfg.rank, cfg.alpha(), stream_task, cfg.seed())?;
                let run = two_phase_lora(&model, &init, &ccfg, &first, &rest)?;
                (run.phase1_before.loss, forgetting_report(&run)?)
            }
            Variant::LoriDense | Variant::LoriSparse => {
                let s = if variant == Variant::LoriSparse { cfg.sparsity.sparsity } else { 0.0 };
                let masks = calibrate_shared_masks(&model, cfg, &datasets, stream_task, s)?;
                let shared = init_lori_set_shared(&model, cfg.rank, cfg.alpha(), stream_task, stream_task, cfg.seed())?;
                let run = two_phase(&model, &shared, &ccfg, &first, &rest, &masks)?;
                (run.phase1_before.loss, forgetting_report(&run)?)
            }
        };
        out.push(ForgettingResult { variant, phase1_before: before, rows });
    }
    Ok(out)
}

/// Model-level overlap of calibrated masks for two tasks with independent projections.
pub fn calibrated_overlap(cfg: &SuiteConfig, task_a: usize, task_b: usize) -> Result<f64> {
    let (model, datasets) = cfg.build()?;
    let pick = |i: usize| datasets.get(i).ok_or_else(|| Error::arg(alloc::format!("no task at index {i}")));
    let (da, db) = (pick(task_a)?, pick(task_b)?);
    let mut ads_a = init_lori_set(&model, cfg.rank, cfg.alpha(), da.task_id, cfg.seed())?;
    let mut ads_b = init_lori_set(&model, cfg.rank, cfg.alpha(), db.task_id, cfg.seed())?;
    let ma = calibrate(&model, &mut ads_a, da, &cfg.sparsity, &cfg.train)?;
    let mb = calibrate(&model, &mut ads_b, db, &cfg.sparsity, &cfg.train)?;
    mask_set_overlap(&ma, &mb)
}
