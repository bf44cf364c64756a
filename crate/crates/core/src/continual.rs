//! Two-phase continual learning: one "safety" task first, then each downstream
//! task continues from that adapter under its own pre-calibrated mask.

use alloc::vec::Vec;

use crate::adapter::{LoraAdapter, LoriAdapter, LowRank};
use crate::calibrate::{mask_set_overlap, MaskSet};
use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::model::ToyModel;
use crate::task::TaskDataset;
use crate::train::{evaluate, train, Metrics, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinualConfig {
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    /// Zero `B` entries inherited from phase 1 that fall inside the new task's mask.
    pub rezero_overlap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTwoResult<A> {
    pub task_id: u64,
    pub adapters: Vec<A>,
    /// Phase-1 task metrics after this phase-2 run.
    pub phase1_after: Metrics,
    /// This task's own metrics after training.
    pub task_metrics: Metrics,
    /// Model-level overlap between the phase-1 mask and this task's mask (LoRI only).
    pub overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualRun<A> {
    pub phase1_task: u64,
    pub phase2_tasks: Vec<u64>,
    pub phase1_adapters: Vec<A>,
    pub phase1_before: Metrics,
    pub results: Vec<Option<PhaseTwoResult<A>>>,
}

fn find_mask(mask_sets: &[MaskSet], task: u64) -> Result<&MaskSet> {
    mask_sets
        .iter()
        .find(|m| m.task_id == task)
        .ok_or_else(|| Error::state(alloc::format!("no calibrated mask for task {task}")))
}

fn union(a: &BitMask, b: &BitMask) -> Result<BitMask> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension { op: "mask union", left: a.shape(), right: b.shape() });
    }
    let mut out = a.clone();
    for (i, on) in b.iter().enumerate() {
        if on {
            out.set_index(i, true);
        }
    }
    Ok(out)
}

/// LoRI two-phase run. `adapters` carries the shared frozen projections (its `B`
/// must be zero); masks are taken from `mask_sets` by task id and never recalibrated.
pub fn two_phase(
    model: &ToyModel,
    adapters: &[LoriAdapter],
    cfg: &ContinualConfig,
    phase1: &TaskDataset,
    phase2: &[TaskDataset],
    mask_sets: &[MaskSet],
) -> Result<ContinualRun<LoriAdapter>> {
    let phase1_masks = find_mask(mask_sets, phase1.task_id)?;
    // Resolve every mask up front so a missing one fails before any training.
    let task_masks: Vec<&MaskSet> = phase2.iter().map(|d| find_mask(mask_sets, d.task_id)).collect::<Result<_>>()?;

    let mut base: Vec<LoriAdapter> = adapters.iter().cloned().map(|a| a.relabel(phase1.task_id)).collect();
    phase1_masks.apply_to(&mut base)?;
    if cfg.phase1.steps > 0 {
        train(model, &mut base, phase1, &cfg.phase1)?;
    }
    let before = evaluate(model, &base, phase1)?;

    let mut results = Vec::with_capacity(phase2.len());
    for (ds, masks) in phase2.iter().zip(task_masks) {
        let mut ads: Vec<LoriAdapter> = base.iter().cloned().map(|a| a.relabel(ds.task_id)).collect();
        for (ad, (_, m)) in ads.iter_mut().zip(&masks.masks) {
            let support = union(ad.mask(), m)?;
            ad.restrict_updates(support, m.clone())?;
            if cfg.rezero_overlap {
                let mut b = ad.b().clone();
                for (i, v) in b.as_mut_slice().iter_mut().enumerate() {
                    if m.get_index(i) {
                        *v = 0.0;
                    }
                }
                ad.set_b(b)?;
            }
        }
        if cfg.phase2.steps > 0 {
            train(model, &mut ads, ds, &cfg.phase2)?;
        }
        results.push(Some(PhaseTwoResult {
            task_id: ds.task_id,
            phase1_after: evaluate(model, &ads, phase1)?,
            task_metrics: evaluate(model, &ads, ds)?,
            overlap: Some(mask_set_overlap(phase1_masks, masks)?),
            adapters: ads,
        }));
    }
    Ok(ContinualRun {
        phase1_task: phase1.task_id,
        phase2_tasks: phase2.iter().map(|d| d.task_id).collect(),
        phase1_adapters: base,
        phase1_before: before,
        results,
    })
}

/// LoRA two-phase baseline: phase 2 continues training both factors without masks.
pub fn two_phase_lora(
    model: &ToyModel,
    adapters: &[LoraAdapter],
    cfg: &ContinualConfig,
    phase1: &TaskDataset,
    phase2: &[TaskDataset],
) -> Result<ContinualRun<LoraAdapter>> {
    let mut base = adapters.to_vec();
    if cfg.phase1.steps > 0 {
        train(model, &mut base, phase1, &cfg.phase1)?;
    }
    let before = evaluate(model, &base, phase1)?;
    let mut results = Vec::with_capacity(phase2.len());
    for ds in phase2 {
        let mut ads = base.clone();
        if cfg.phase2.steps > 0 {
            train(model, &mut ads, ds, &cfg.phase2)?;
        }
        results.push(Some(PhaseTwoResult {
            task_id: ds.task_id,
            phase1_after: evaluate(model, &ads, phase1)?,
            task_metrics: evaluate(model, &ads, ds)?,
            overlap: None,
            adapters: ads,
        }));
    }
    Ok(ContinualRun {
        phase1_task: phase1.task_id,
        phase2_tasks: phase2.iter().map(|d| d.task_id).collect(),
        phase1_adapters: base,
        phase1_before: before,
        results,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingRow {
    pub task_id: u64,
    /// Phase-1 task loss after minus before.
    pub delta_loss: f64,
    /// Phase-1 task accuracy after minus before, for classification.
    pub delta_accuracy: Option<f64>,
    pub task_loss: f64,
    pub task_accuracy: Option<f64>,
    pub overlap: Option<f64>,
}

pub fn forgetting_report<A>(run: &ContinualRun<A>) -> Result<Vec<ForgettingRow>> {
    if run.results.len() != run.phase2_tasks.len() {
        return Err(Error::state("continual run is incomplete"));
    }
    run.results
        .iter()
        .zip(&run.phase2_tasks)
        .map(|(r, &task)| {
            let r = r.as_ref().ok_or_else(|| Error::state(alloc::format!("phase 2 for task {task} did not run")))?;
            Ok(ForgettingRow {
                task_id: r.task_id,
                delta_loss: r.phase1_after.loss - run.phase1_before.loss,
                delta_accuracy: match (r.phase1_after.accuracy, run.phase1_before.accuracy) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                },
                task_loss: r.task_metrics.loss,
                task_accuracy: r.task_metrics.accuracy,
                overlap: r.overlap,
            })
        })
        .collect()
}

/// Mean phase-1 loss increase across phase-2 tasks.
pub fn mean_forgetting<A>(run: &ContinualRun<A>) -> Result<f64> {
    let rows = forgetting_report(run)?;
    Ok(rows.iter().map(|r| r.delta_loss).sum::<f64>() / rows.len() as f64)
}

/// Sanity accessor used by tests: every adapter of the run shares the projections of `reference`.
pub fn shares_projections<A: LowRank>(run: &ContinualRun<A>, reference: &[A]) -> bool {
    let same = |ads: &[A]| ads.iter().zip(reference).all(|(x, y)| x.a() == y.a());
    same(&run.phase1_adapters) && run.results.iter().flatten().all(|r| same(&r.adapters))
}
