//! Mask-restricted optimization of adapter factors.
//!
//! Gradients for `B` are multiplied by the adapter's update mask before the
//! optimizer sees them; masked-out coordinates are never written, so they stay
//! bitwise identical across any number of steps.

use alloc::vec;
use alloc::vec::Vec;

use crate::adapter::{LoraAdapter, LoriAdapter, LowRank};
use crate::autodiff::{GradGraph, Var};
use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::matrix::Matrix;
use crate::model::{FactorVars, ToyModel};
use crate::rng::{Purpose, RngStream, StreamKey};
use crate::task::{TaskDataset, Targets};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-2, steps: 200, batch_size: 16, optimizer: OptimizerKind::adamw(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(alloc::format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::arg("training needs at least one step"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(())
    }
}

/// Loss plus accuracy for classification tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Parameter access the trainer needs.
pub trait Trainable: LowRank {
    fn trains_a(&self) -> bool;
    /// Positions of `B` that may change; `None` means all.
    fn b_update_mask(&self) -> Option<&BitMask>;
    fn a_mut(&mut self) -> &mut Matrix;
    fn b_mut(&mut self) -> &mut Matrix;
}

impl Trainable for LoriAdapter {
    fn trains_a(&self) -> bool {
        false
    }

    fn b_update_mask(&self) -> Option<&BitMask> {
        Some(self.update_mask())
    }

    fn a_mut(&mut self) -> &mut Matrix {
        unreachable!("LoRI projections are frozen")
    }

    fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }
}

impl Trainable for LoraAdapter {
    fn trains_a(&self) -> bool {
        self.train_a
    }

    fn b_update_mask(&self) -> Option<&BitMask> {
        None
    }

    fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn like(x: &Matrix) -> Self {
        Self { m: Matrix::zeros(x.rows(), x.cols()), v: Matrix::zeros(x.rows(), x.cols()) }
    }
}

/// Optimizer moments for every trainable factor, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    a: Vec<Option<Moments>>,
    b: Vec<Moments>,
    step: u64,
}

impl OptimizerState {
    pub fn new<T: Trainable>(adapters: &[T]) -> Self {
        Self {
            a: adapters.iter().map(|ad| ad.trains_a().then(|| Moments::like(ad.a()))).collect(),
            b: adapters.iter().map(|ad| Moments::like(&ad.effective_b())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

fn update(
    param: &mut Matrix,
    grad: &Matrix,
    mask: Option<&BitMask>,
    moments: &mut Moments,
    cfg: &TrainConfig,
    t: u64,
) {
    let lr = cfg.lr;
    let params = param.as_mut_slice();
    let grads = grad.as_slice();
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                if mask.is_some_and(|m| !m.get_index(i)) {
                    continue;
                }
                *p -= lr * g;
            }
        }
        OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
            let bc1 = 1.0 - libm::pow(beta1, t as f64);
            let bc2 = 1.0 - libm::pow(beta2, t as f64);
            let (m, v) = (moments.m.as_mut_slice(), moments.v.as_mut_slice());
            for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
                if mask.is_some_and(|mk| !mk.get_index(i)) {
                    continue;
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * (m_hat / (libm::sqrt(v_hat) + eps) + weight_decay * *p);
            }
        }
    }
}

/// Attaches the task loss to `output`.
pub fn attach_loss(g: &mut GradGraph, output: Var, targets: &Targets) -> Result<Var> {
    match targets {
        Targets::Values(y) => g.mse(output, y.clone()),
        Targets::Classes(c) => g.cross_entropy(output, c.clone()),
    }
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

fn metrics_from(g: &GradGraph, output: Var, loss: Var, targets: &Targets) -> Metrics {
    Metrics {
        loss: g.scalar(loss),
        accuracy: match targets {
            Targets::Classes(c) => Some(accuracy(g.value(output), c)),
            Targets::Values(_) => None,
        },
    }
}

/// One optimizer step on `batch`. Returns the loss of the forward pass that produced the gradients.
pub fn train_step<T: Trainable>(
    model: &ToyModel,
    adapters: &mut [T],
    batch: &TaskDataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<f64> {
    let mut g = GradGraph::new();
    let mut factors = Vec::with_capacity(adapters.len());
    for ad in adapters.iter() {
        let a = if ad.trains_a() { g.leaf(ad.a().clone()) } else { g.constant(ad.a().clone()) };
        let b = g.leaf(ad.effective_b());
        factors.push(Some(FactorVars { a, b, scale: ad.scale() }));
    }
    let output = model.forward_graph(&mut g, &batch.inputs, model.base_weights(), &factors)?;
    let loss = attach_loss(&mut g, output, &batch.targets)?;
    let value = g.scalar(loss);
    state.step += 1;
    if !value.is_finite() {
        return Err(Error::Training { step: state.step as usize, loss: value });
    }
    let mut grads = g.backward(loss)?;
    let t = state.step;
    for (i, (ad, f)) in adapters.iter_mut().zip(&factors).enumerate() {
        let f = f.expect("every slot has factors");
        let gb = grads.take(f.b);
        let mask = ad.b_update_mask().cloned();
        update(ad.b_mut(), &gb, mask.as_ref(), &mut state.b[i], cfg, t);
        if ad.trains_a() {
            let ga = grads.take(f.a);
            let moments = state.a[i].as_mut().expect("A moments exist for trainable A");
            update(ad.a_mut(), &ga, None, moments, cfg, t);
        }
    }
    Ok(value)
}

/// Deterministic shuffled-epoch minibatches.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    n: usize,
    batch_size: usize,
    seed: u64,
    task_id: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize, seed: u64, task_id: u64) -> Self {
        let mut s = Self { n, batch_size, seed, task_id, epoch: 0, order: Vec::new(), pos: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let key = StreamKey::new(Purpose::Shuffle, self.task_id, self.epoch, 0);
        RngStream::new(self.seed, key).rng().shuffle(&mut self.order);
        self.pos = 0;
    }

    /// Indices of the next batch; the last batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.n);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    /// Steps in one pass over the data.
    pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
        n.div_ceil(batch_size)
    }
}

/// Runs `cfg.steps` updates with fresh optimizer state; returns per-step losses.
pub fn train<T: Trainable>(
    model: &ToyModel,
    adapters: &mut [T],
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("training dataset is empty"));
    }
    let mut state = OptimizerState::new(adapters);
    let mut schedule = BatchSchedule::new(dataset.len(), cfg.batch_size, cfg.seed, dataset.task_id);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = dataset.select(&schedule.next_batch());
        losses.push(train_step(model, adapters, &batch, cfg, &mut state)?);
    }
    Ok(losses)
}

/// LoRI adaptation: `B` under its mask, `A` frozen.
pub fn train_adapter(
    model: &ToyModel,
    adapters: &mut [LoriAdapter],
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    train(model, adapters, dataset, cfg)
}

/// LoRA baseline: both factors unmasked.
pub fn train_lora_baseline(
    model: &ToyModel,
    adapters: &mut [LoraAdapter],
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    train(model, adapters, dataset, cfg)
}

/// Loss (and accuracy) of the base model with adapters attached.
pub fn evaluate<T: LowRank>(model: &ToyModel, adapters: &[T], dataset: &TaskDataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::arg("evaluation dataset is empty"));
    }
    let mut g = GradGraph::new();
    let factors: Vec<Option<FactorVars>> = adapters
        .iter()
        .map(|ad| {
            let a = g.constant(ad.a().clone());
            let b = g.constant(ad.effective_b());
            Some(FactorVars { a, b, scale: ad.scale() })
        })
        .collect();
    let output = model.forward_graph(&mut g, &dataset.inputs, model.base_weights(), &factors)?;
    let loss = attach_loss(&mut g, output, &dataset.targets)?;
    Ok(metrics_from(&g, output, loss, &dataset.targets))
}

/// Loss (and accuracy) of the model with the given per-slot weights and no adapters.
pub fn evaluate_weights(model: &ToyModel, weights: &[Matrix], dataset: &TaskDataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::arg("evaluation dataset is empty"));
    }
    let mut g = GradGraph::new();
    let none = vec![None; model.slots().len()];
    let output = model.forward_graph(&mut g, &dataset.inputs, weights, &none)?;
    let loss = attach_loss(&mut g, output, &dataset.targets)?;
    Ok(metrics_from(&g, output, loss, &dataset.targets))
}
