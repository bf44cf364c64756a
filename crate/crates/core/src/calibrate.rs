//! Mask calibration: a short dense pass on `B`, magnitude pooling within a
//! scope, an exact-budget top-k mask, then a reset of `B` to zero.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::adapter::{LoriAdapter, LowRank};
use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::matrix::Matrix;
use crate::model::{SlotId, ToyModel};
use crate::select::{magnitude_order, retained_count};
use crate::task::TaskDataset;
use crate::train::{train, BatchSchedule, TrainConfig};

/// Pooling scope for the magnitude threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Granularity {
    #[default]
    Model,
    Module,
    Projection,
    Layer,
    Matrix,
}

impl Granularity {
    pub const ALL: [Granularity; 5] = [
        Granularity::Model,
        Granularity::Module,
        Granularity::Projection,
        Granularity::Layer,
        Granularity::Matrix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Model => "model",
            Granularity::Module => "module",
            Granularity::Projection => "projection",
            Granularity::Layer => "layer",
            Granularity::Matrix => "matrix",
        }
    }

    /// Scope label of `slot` under this granularity.
    pub fn scope_of(self, slot: SlotId) -> String {
        match self {
            Granularity::Model => "model".to_string(),
            Granularity::Module => slot.projection.module().name().to_string(),
            Granularity::Projection => slot.projection.name().to_string(),
            Granularity::Layer => alloc::format!("layer{}", slot.layer),
            Granularity::Matrix => slot.to_string(),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::arg(alloc::format!("unknown mask granularity `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityConfig {
    /// Fraction of `B` entries masked out, in `[0, 1)`.
    pub sparsity: f64,
    pub granularity: Granularity,
    /// `None` means one pass over the calibration data.
    pub calibration_steps: Option<usize>,
}

impl SparsityConfig {
    pub fn new(sparsity: f64, granularity: Granularity) -> Self {
        Self { sparsity, granularity, calibration_steps: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::arg(alloc::format!("sparsity must be in [0, 1), got {}", self.sparsity)));
        }
        if self.calibration_steps == Some(0) {
            return Err(Error::arg("calibration needs at least one step"));
        }
        Ok(())
    }
}

/// Calibrated masks for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub task_id: u64,
    pub config: SparsityConfig,
    pub masks: Vec<(SlotId, BitMask)>,
    /// Threshold `τ` per scope label.
    pub thresholds: BTreeMap<String, f64>,
}

impl MaskSet {
    pub fn mask(&self, slot: SlotId) -> Option<&BitMask> {
        self.masks.iter().find(|(s, _)| *s == slot).map(|(_, m)| m)
    }

    pub fn retained(&self) -> usize {
        self.masks.iter().map(|(_, m)| m.count_ones()).sum()
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(|(_, m)| m.len()).sum()
    }

    /// Installs these masks on a model's adapters (slot order must match).
    pub fn apply_to(&self, adapters: &mut [LoriAdapter]) -> Result<()> {
        if adapters.len() != self.masks.len() {
            return Err(Error::arg(alloc::format!(
                "mask set has {} slots, adapters have {}",
                self.masks.len(),
                adapters.len()
            )));
        }
        for (ad, (_, m)) in adapters.iter_mut().zip(&self.masks) {
            ad.apply_mask(m.clone())?;
        }
        Ok(())
    }
}

/// Model-level overlap: shared set bits over all positions.
pub fn mask_set_overlap(a: &MaskSet, b: &MaskSet) -> Result<f64> {
    if a.masks.len() != b.masks.len() {
        return Err(Error::arg("mask sets cover different slots"));
    }
    let mut shared = 0;
    let mut total = 0;
    for ((sa, ma), (sb, mb)) in a.masks.iter().zip(&b.masks) {
        if sa != sb {
            return Err(Error::arg(alloc::format!("slot mismatch: {sa} vs {sb}")));
        }
        shared += ma.and(mb)?.count_ones();
        total += ma.len();
    }
    Ok(shared as f64 / total as f64)
}

/// Groups of slot indices sharing one threshold. Groups follow first appearance in
/// `slots`; members keep slot order.
pub fn scope_partition(slots: &[SlotId], granularity: Granularity) -> Result<Vec<(String, Vec<usize>)>> {
    if slots.is_empty() {
        return Err(Error::arg("model has no adapter slots"));
    }
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, &slot) in slots.iter().enumerate() {
        let label = granularity.scope_of(slot);
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, members)) => members.push(i),
            None => groups.push((label, alloc::vec![i])),
        }
    }
    Ok(groups)
}

/// Exact-budget magnitude mask over pooled matrices.
///
/// Keeps `ceil((1 - s) N)` entries ranked by magnitude (ties: earlier pooled index
/// first). Returns one mask per input matrix and the threshold `τ`, the smallest
/// retained magnitude.
pub fn make_mask(entries: &[&Matrix], sparsity: f64) -> Result<(Vec<BitMask>, f64)> {
    let pooled: Vec<f64> = entries.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::arg("mask scope is empty"));
    }
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::arg(alloc::format!("sparsity must be in [0, 1), got {sparsity}")));
    }
    let k = retained_count(sparsity, pooled.len());
    let order = magnitude_order(&pooled);
    let tau = pooled[order[k - 1]].abs();
    let mut keep = alloc::vec![false; pooled.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    let mut masks = Vec::with_capacity(entries.len());
    let mut offset = 0;
    for m in entries {
        masks.push(BitMask::from_bools(m.rows(), m.cols(), &keep[offset..offset + m.len()])?);
        offset += m.len();
    }
    Ok((masks, tau))
}

/// Masks for already-trained `B` matrices (in model slot order), without training.
pub fn masks_from_b(slots: &[SlotId], b: &[&Matrix], config: &SparsityConfig, task_id: u64) -> Result<MaskSet> {
    config.validate()?;
    if slots.len() != b.len() {
        return Err(Error::arg("one B matrix per slot required"));
    }
    let mut masks: Vec<Option<BitMask>> = alloc::vec![None; slots.len()];
    let mut thresholds = BTreeMap::new();
    for (label, members) in scope_partition(slots, config.granularity)? {
        let scoped: Vec<&Matrix> = members.iter().map(|&i| b[i]).collect();
        let (scope_masks, tau) = make_mask(&scoped, config.sparsity)?;
        for (&i, m) in members.iter().zip(scope_masks) {
            masks[i] = Some(m);
        }
        thresholds.insert(label, tau);
    }
    Ok(MaskSet {
        task_id,
        config: *config,
        masks: slots.iter().copied().zip(masks.into_iter().map(|m| m.expect("partition covers slots"))).collect(),
        thresholds,
    })
}

/// Calibrates masks for `adapters` on `dataset`, installs them and resets `B` to zero.
///
/// The calibration pass trains every `B` without a mask using `train_cfg`'s
/// optimizer and learning rate; its optimizer state is discarded afterwards.
pub fn calibrate(
    model: &ToyModel,
    adapters: &mut [LoriAdapter],
    dataset: &TaskDataset,
    sparsity: &SparsityConfig,
    train_cfg: &TrainConfig,
) -> Result<MaskSet> {
    sparsity.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("calibration dataset is empty"));
    }
    if adapters.len() != model.slots().len() {
        return Err(Error::arg("one adapter per model slot required"));
    }
    if adapters.iter().any(|ad| ad.b().as_slice().iter().any(|&v| v != 0.0)) {
        return Err(Error::state("calibration needs freshly initialized or reset adapters"));
    }
    for ad in adapters.iter_mut() {
        ad.clear_mask();
    }
    let steps = sparsity
        .calibration_steps
        .unwrap_or_else(|| BatchSchedule::steps_per_epoch(dataset.len(), train_cfg.batch_size));
    let cfg = TrainConfig { steps, ..*train_cfg };
    train(model, adapters, dataset, &cfg)?;

    let task_id = adapters.first().map_or(dataset.task_id, |a| a.task_id());
    let b: Vec<&Matrix> = adapters.iter().map(|a| a.b()).collect();
    let set = masks_from_b(model.slots(), &b, sparsity, task_id)?;
    for ad in adapters.iter_mut() {
        ad.reset_b();
    }
    set.apply_to(adapters)?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotProfile {
    pub slot: SlotId,
    pub retained: usize,
    pub total: usize,
}

impl SlotProfile {
    pub fn fraction(&self) -> f64 {
        self.retained as f64 / self.total as f64
    }
}

/// Where a mask set spends its parameter budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub slots: Vec<SlotProfile>,
    pub retained: usize,
    pub total: usize,
    pub thresholds: BTreeMap<String, f64>,
}

impl CalibrationReport {
    pub fn retained_fraction(&self) -> f64 {
        self.retained as f64 / self.total as f64
    }

    /// Pooled retained fraction over the slots of one module group.
    pub fn module_fraction(&self, module: crate::model::ModuleKind) -> f64 {
        let (r, t) = self
            .slots
            .iter()
            .filter(|s| s.slot.projection.module() == module)
            .fold((0, 0), |(r, t), s| (r + s.retained, t + s.total));
        r as f64 / t as f64
    }
}

pub fn sparsity_profile(masks: &MaskSet) -> CalibrationReport {
    let slots: Vec<SlotProfile> = masks
        .masks
        .iter()
        .map(|(slot, m)| SlotProfile { slot: *slot, retained: m.count_ones(), total: m.len() })
        .collect();
    CalibrationReport {
        retained: slots.iter().map(|s| s.retained).sum(),
        total: slots.iter().map(|s| s.total).sum(),
        slots,
        thresholds: masks.thresholds.clone(),
    }
}
