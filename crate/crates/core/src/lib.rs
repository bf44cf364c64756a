//! Sparse low-rank adapters with frozen random projections.
//!
//! Each adapter slot contributes `Δ = (alpha / r) · A (B ⊙ M)`: `A` is a frozen
//! Kaiming-uniform projection drawn from a per-task random stream, `B` is trained
//! only where the calibrated mask `M` is set. The crate covers mask calibration,
//! masked training, five merging strategies, Monte-Carlo orthogonality checks and a
//! two-phase continual-learning pipeline, all on a small frozen toy transformer.
//!
//! The crate is `no_std` (it needs `alloc`); IO, file formats and the CLI live in
//! the `lori-harness` crate.
#![no_std]

extern crate alloc;

pub mod adapter;
pub mod autodiff;
pub mod calibrate;
pub mod continual;
pub mod error;
pub mod mask;
pub mod matrix;
pub mod merge;
pub mod model;
pub mod ortho;
pub mod rng;
pub mod select;
pub mod suite;
pub mod task;
pub mod train;

pub use adapter::{
    count_trainable, default_alpha, forward, init_lori, init_lori_set, init_lori_set_shared, init_lora_set,
    merge_into_base, AdapterShape, LoraAdapter, LoriAdapter, LowRank, ParamCount,
};
pub use autodiff::{GradGraph, Gradients, Var};
pub use calibrate::{
    calibrate, make_mask, mask_set_overlap, scope_partition, sparsity_profile, CalibrationReport, Granularity, MaskSet,
    SparsityConfig,
};
pub use error::{Error, Result};
pub use mask::{mask_overlap, BitMask};
pub use matrix::Matrix;
pub use merge::{interference, merge, InterferenceReport, MergeMethod, MergeSpec, MergedModel};
pub use model::{build_toy_model, ModelConfig, ModuleKind, Projection, SlotId, ToyModel};
pub use rng::{kaiming_uniform, Purpose, RngStream, StreamKey};
pub use select::kth_largest_abs;
pub use task::{gen_task, LossKind, TaskDataset, TaskKind, TaskSpec, Targets};
pub use train::{evaluate, evaluate_weights, train_adapter, train_lora_baseline, train_step, Metrics, OptimizerKind, TrainConfig};
