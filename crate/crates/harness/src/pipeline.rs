//! Canned experiment pipelines writing adapters, CSV reports and a manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lori_core::continual::ForgettingRow;
use lori_core::ortho::{decay_sweep_with, gram_trials, SweepOptions};
use lori_core::suite::{
    forgetting_experiment, interference_experiment, sparsity_sweep, train_lori_task, MergeSettings, SuiteConfig,
};
use lori_core::{calibrate, count_trainable, init_lori_set, sparsity_profile, LoriAdapter, ParamCount, ToyModel};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::format::{AdapterFile, FORMAT_VERSION};
use crate::report::Table;
use crate::row;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Calibrate,
    Train,
    Merge,
    Eval,
    Ortho,
    Continual,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Calibrate, Stage::Train, Stage::Merge, Stage::Eval, Stage::Ortho, Stage::Continual];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Calibrate => "calibrate",
            Stage::Train => "train",
            Stage::Merge => "merge",
            Stage::Eval => "eval",
            Stage::Ortho => "ortho",
            Stage::Continual => "continual",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything written by a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub adapter_format_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub stages: Vec<Stage>,
    pub outputs: Vec<String>,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    outputs: Vec<String>,
}

impl Run<'_> {
    fn table(&mut self, name: &str, table: &Table) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        table.write(&path).map_err(|e| HarnessError::io(&path, e))?;
        self.outputs.push(name.into());
        Ok(())
    }

    fn adapters(&mut self, name: String, file: &AdapterFile) -> Result<(), HarnessError> {
        let dir = self.dir.join("adapters");
        fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        file.save(dir.join(&name))?;
        self.outputs.push(format!("adapters/{name}"));
        Ok(())
    }

    fn suites(&self) -> Result<Vec<(SuiteConfig, ToyModel, Vec<lori_core::TaskDataset>)>, HarnessError> {
        self.cfg
            .seeds
            .iter()
            .map(|&seed| {
                let suite = self.cfg.suite(seed);
                let (model, data) = suite.build()?;
                Ok((suite, model, data))
            })
            .collect()
    }

    fn stage(&mut self, stage: Stage) -> Result<(), HarnessError> {
        match stage {
            Stage::Calibrate => self.calibrate(),
            Stage::Train => self.train(),
            Stage::Merge => self.merge(),
            Stage::Eval => self.eval(),
            Stage::Ortho => self.ortho(),
            Stage::Continual => self.continual(),
        }
    }

    fn calibrate(&mut self) -> Result<(), HarnessError> {
        let mut table = Table::new(&["seed", "task_id", "slot", "retained", "total", "fraction"]);
        for (suite, model, data) in self.suites()? {
            for ds in &data {
                let mut ads = init_lori_set(&model, suite.rank, suite.alpha(), ds.task_id, suite.seed())?;
                let masks = calibrate(&model, &mut ads, ds, &suite.sparsity, &suite.train)?;
                let profile = sparsity_profile(&masks);
                for s in &profile.slots {
                    table.push(row![suite.seed(), ds.task_id, s.slot.to_string(), s.retained, s.total, s.fraction()]);
                }
                table.push(row![suite.seed(), ds.task_id, "all", profile.retained, profile.total, profile.retained_fraction()]);
                let file = slot_file(&model, ads, &suite)?;
                self.adapters(format!("calibrated_seed{}_task{}.lori", suite.seed(), ds.task_id), &file)?;
            }
        }
        self.table("calibration.csv", &table)
    }

    fn train(&mut self) -> Result<(), HarnessError> {
        let mut table = Table::new(&[
            "seed", "task_id", "kind", "sparsity", "loss", "accuracy", "metric", "trainable", "lora_trainable",
        ]);
        for (suite, model, data) in self.suites()? {
            for ds in &data {
                let (ads, _) = train_lori_task(&model, &suite, ds, suite.sparsity.sparsity)?;
                let m = lori_core::evaluate(&model, &ads, ds)?;
                let kind = if suite.sparsity.sparsity > 0.0 { ParamCount::LoriSparse } else { ParamCount::LoriDense };
                table.push(row![
                    suite.seed(),
                    ds.task_id,
                    ds.kind.map(|k| k.to_string()),
                    suite.sparsity.sparsity,
                    m.loss,
                    m.accuracy,
                    lori_core::suite::task_metric(&model, &ads, ds)?,
                    count_trainable(&ads, kind)?,
                    count_trainable(&ads, ParamCount::Lora)?,
                ]);
                let file = slot_file(&model, ads, &suite)?;
                self.adapters(format!("trained_seed{}_task{}.lori", suite.seed(), ds.task_id), &file)?;
            }
        }
        self.table("train.csv", &table)
    }

    fn merge(&mut self) -> Result<(), HarnessError> {
        let settings = MergeSettings {
            methods: self.cfg.merge_methods()?,
            weights: (!self.cfg.merge.weights.is_empty()).then(|| self.cfg.merge.weights.clone()),
            density: self.cfg.merge.density,
        };
        let variants = self.cfg.merge_variants()?;
        let mut table =
            Table::new(&["seed", "variant", "method", "task_id", "single_loss", "merged_loss", "interference"]);
        for &seed in &self.cfg.seeds {
            for r in interference_experiment(&self.cfg.suite(seed), &variants, &settings)? {
                table.push(row![
                    seed,
                    r.variant.name(),
                    r.method.name(),
                    r.task_id,
                    r.single_loss,
                    r.merged_loss,
                    r.interference
                ]);
            }
        }
        self.table("merge.csv", &table)
    }

    fn eval(&mut self) -> Result<(), HarnessError> {
        let mut table = Table::new(&["seed", "task_id", "kind", "sparsity", "retained", "loss", "accuracy", "metric"]);
        for &seed in &self.cfg.seeds {
            for r in sparsity_sweep(&self.cfg.suite(seed), &self.cfg.eval.sparsities)? {
                table.push(row![
                    seed,
                    r.task_id,
                    r.kind.map(|k| k.to_string()),
                    r.sparsity,
                    r.retained,
                    r.loss,
                    r.accuracy,
                    r.metric
                ]);
            }
        }
        self.table("eval.csv", &table)
    }

    fn ortho(&mut self) -> Result<(), HarnessError> {
        let o = &self.cfg.ortho;
        let mut gram = Table::new(&["seed", "trial", "r", "d_in", "delta", "norm", "bound", "satisfied"]);
        let mut decay = Table::new(&["seed", "r", "d_in", "trials", "mean", "std", "bound", "satisfaction"]);
        for &seed in &self.cfg.seeds {
            let report = gram_trials(o.rank, o.d_in, o.delta, o.trials, seed)?;
            for (i, &n) in report.norms.iter().enumerate() {
                gram.push(row![seed, i, o.rank, o.d_in, o.delta, n, report.bound, n <= report.bound]);
            }
            let opts = SweepOptions { r: o.rank, d_out: o.rank, delta: o.delta, trials: o.sweep_trials, seed };
            for p in decay_sweep_with(&opts, &o.sweep_d_in)? {
                decay.push(row![seed, o.rank, p.d_in, o.sweep_trials, p.mean, p.std, p.bound, p.satisfaction]);
            }
        }
        self.table("ortho_gram.csv", &gram)?;
        self.table("ortho_decay.csv", &decay)
    }

    fn continual(&mut self) -> Result<(), HarnessError> {
        let c = &self.cfg.continual;
        let variants = self.cfg.continual_variants()?;
        let mut table = Table::new(&[
            "seed",
            "variant",
            "phase1_task",
            "task_id",
            "phase1_loss_before",
            "delta_loss",
            "delta_accuracy",
            "task_loss",
            "task_accuracy",
            "overlap",
        ]);
        for &seed in &self.cfg.seeds {
            let suite = self.cfg.suite(seed);
            let phase1_task = suite.tasks[c.phase1].task_id;
            for res in forgetting_experiment(&suite, c.phase1, &variants, c.rezero_overlap)? {
                for ForgettingRow { task_id, delta_loss, delta_accuracy, task_loss, task_accuracy, overlap } in res.rows {
                    table.push(row![
                        seed,
                        res.variant.name(),
                        phase1_task,
                        task_id,
                        res.phase1_before,
                        delta_loss,
                        delta_accuracy,
                        task_loss,
                        task_accuracy,
                        overlap
                    ]);
                }
            }
        }
        self.table("continual.csv", &table)
    }
}

fn slot_file(model: &ToyModel, ads: Vec<LoriAdapter>, suite: &SuiteConfig) -> Result<AdapterFile, HarnessError> {
    let names = model.slots().iter().map(|s| s.to_string()).collect();
    let sparsity = (suite.sparsity.sparsity > 0.0).then_some(suite.sparsity);
    Ok(AdapterFile::new(ads, names, suite.seed(), sparsity)?)
}

/// Runs `stages` in order, writing everything under `dir`.
///
/// Identical configs produce byte-identical outputs.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[Stage], dir: &Path) -> Result<PipelineOutput, HarnessError> {
    let config_hash = cfg.hash();
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut run = Run { cfg, dir, outputs: Vec::new() };
    for &stage in stages {
        run.stage(stage).map_err(|e| HarnessError::Stage {
            stage,
            config_hash: config_hash.clone(),
            source: Box::new(e),
        })?;
    }
    let manifest = Manifest {
        tool: "lori".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        adapter_format_version: FORMAT_VERSION,
        config_hash,
        seeds: cfg.seeds.clone(),
        stages: stages.to_vec(),
        outputs: run.outputs,
        config: cfg.canonical(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))?;
    Ok(PipelineOutput { dir: dir.to_path_buf(), manifest })
}
