//! LoRI and LoRA adapters for a single weight slot, plus model-wide adapter sets.
//!
//! A LoRI adapter contributes `Δ = (alpha / r) · A (B ⊙ M)` where `A` is a frozen
//! random projection, `B` is trained and `M` is a binary mask. A LoRA adapter
//! contributes `(alpha / r) · A B` with both factors trainable.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::matrix::Matrix;
use crate::model::{SlotId, ToyModel};
use crate::rng::{kaiming_uniform, Purpose, RngStream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AdapterShape {
    pub d_in: usize,
    pub d_out: usize,
    pub r: usize,
}

impl AdapterShape {
    pub fn new(d_in: usize, d_out: usize, r: usize) -> Result<Self> {
        let shape = Self { d_in, d_out, r };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 || self.r > self.d_in.min(self.d_out) {
            return Err(Error::arg(alloc::format!(
                "rank {} outside 1..={} for a {}x{} weight",
                self.r,
                self.d_in.min(self.d_out),
                self.d_in,
                self.d_out
            )));
        }
        Ok(())
    }
}

/// Conventional scaling `alpha = 2r`.
pub fn default_alpha(r: usize) -> f64 {
    2.0 * r as f64
}

/// Read access shared by both adapter kinds.
pub trait LowRank {
    fn shape(&self) -> AdapterShape;
    fn a(&self) -> &Matrix;
    /// The `B` factor as it enters the product (masked for LoRI).
    fn effective_b(&self) -> Matrix;
    fn alpha(&self) -> f64;
    fn task_id(&self) -> u64;

    fn scale(&self) -> f64 {
        self.alpha() / self.shape().r as f64
    }

    /// `(scale · A, B_eff)`, whose product is the delta.
    fn factors(&self) -> (Matrix, Matrix) {
        (self.a().scale(self.scale()), self.effective_b())
    }

    /// Materialized `d_in x d_out` update.
    fn delta(&self) -> Matrix {
        let (a, b) = self.factors();
        a.matmul(&b).expect("adapter factors conform")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoriAdapter {
    shape: AdapterShape,
    a: Matrix,
    pub(crate) b: Matrix,
    mask: BitMask,
    /// Positions that receive gradient updates; `None` means all of `mask`.
    update_mask: Option<BitMask>,
    alpha: f64,
    task_id: u64,
    stream: RngStream,
    calibrated: bool,
}

impl LoriAdapter {
    /// Fresh adapter: `A` drawn from `stream`, `B = 0`, all-ones mask.
    pub fn init(shape: AdapterShape, alpha: f64, task_id: u64, stream: RngStream) -> Result<Self> {
        shape.validate()?;
        if !alpha.is_finite() {
            return Err(Error::arg("alpha must be finite"));
        }
        Ok(Self {
            a: kaiming_uniform(shape.d_in, shape.r, &stream)?,
            b: Matrix::zeros(shape.r, shape.d_out),
            mask: BitMask::ones(shape.r, shape.d_out),
            update_mask: None,
            shape,
            alpha,
            task_id,
            stream,
            calibrated: false,
        })
    }

    /// Builds an adapter from stored parts (e.g. a file). `B` is zeroed outside `mask`.
    pub fn from_parts(
        a: Matrix,
        b: Matrix,
        mask: BitMask,
        alpha: f64,
        task_id: u64,
        stream: RngStream,
        calibrated: bool,
    ) -> Result<Self> {
        let shape = AdapterShape::new(a.rows(), b.cols(), a.cols())?;
        if b.rows() != shape.r {
            return Err(Error::Dimension { op: "adapter factors", left: a.shape(), right: b.shape() });
        }
        if mask.shape() != b.shape() {
            return Err(Error::Dimension { op: "adapter mask", left: b.shape(), right: mask.shape() });
        }
        let b = mask.apply(&b)?;
        Ok(Self { shape, a, b, mask, update_mask: None, alpha, task_id, stream, calibrated })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn mask(&self) -> &BitMask {
        &self.mask
    }

    pub fn update_mask(&self) -> &BitMask {
        self.update_mask.as_ref().unwrap_or(&self.mask)
    }

    pub fn stream(&self) -> &RngStream {
        &self.stream
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    pub fn relabel(mut self, task_id: u64) -> Self {
        self.task_id = task_id;
        self
    }

    /// Installs a calibrated mask; `B` entries outside it are zeroed.
    pub fn apply_mask(&mut self, mask: BitMask) -> Result<()> {
        self.b = mask.apply(&self.b)?;
        self.mask = mask;
        self.update_mask = None;
        self.calibrated = true;
        Ok(())
    }

    /// Widens the support to `support` while restricting updates to `update`.
    ///
    /// Used when continuing training from an earlier adapter: entries already
    /// trained outside `update` keep contributing but stay fixed.
    pub fn restrict_updates(&mut self, support: BitMask, update: BitMask) -> Result<()> {
        if !update.is_subset_of(&support) {
            return Err(Error::arg("update mask must lie inside the support mask"));
        }
        self.b = support.apply(&self.b)?;
        self.mask = support;
        self.update_mask = Some(update);
        Ok(())
    }

    /// Restores the pre-calibration all-ones mask.
    pub fn clear_mask(&mut self) {
        self.mask = BitMask::ones(self.shape.r, self.shape.d_out);
        self.update_mask = None;
        self.calibrated = false;
    }

    /// Sets `B`; entries outside the mask are forced to zero.
    pub fn set_b(&mut self, b: Matrix) -> Result<()> {
        self.b = self.mask.apply(&b)?;
        Ok(())
    }

    pub fn reset_b(&mut self) {
        self.b = Matrix::zeros(self.shape.r, self.shape.d_out);
    }
}

impl LowRank for LoriAdapter {
    fn shape(&self) -> AdapterShape {
        self.shape
    }

    fn a(&self) -> &Matrix {
        &self.a
    }

    fn effective_b(&self) -> Matrix {
        self.mask.apply(&self.b).expect("mask matches B")
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn task_id(&self) -> u64 {
        self.task_id
    }
}

/// Plain LoRA baseline: both factors trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    shape: AdapterShape,
    pub(crate) a: Matrix,
    pub(crate) b: Matrix,
    alpha: f64,
    task_id: u64,
    /// When false, `A` receives no updates (LoRA-FA style).
    pub train_a: bool,
}

impl LoraAdapter {
    /// Kaiming-uniform `A`, zero `B`.
    pub fn init(shape: AdapterShape, alpha: f64, task_id: u64, stream: RngStream) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            a: kaiming_uniform(shape.d_in, shape.r, &stream)?,
            b: Matrix::zeros(shape.r, shape.d_out),
            shape,
            alpha,
            task_id,
            train_a: true,
        })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn set_b(&mut self, b: Matrix) -> Result<()> {
        if b.shape() != self.b.shape() {
            return Err(Error::Dimension { op: "set_b", left: self.b.shape(), right: b.shape() });
        }
        self.b = b;
        Ok(())
    }
}

impl LowRank for LoraAdapter {
    fn shape(&self) -> AdapterShape {
        self.shape
    }

    fn a(&self) -> &Matrix {
        &self.a
    }

    fn effective_b(&self) -> Matrix {
        self.b.clone()
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn task_id(&self) -> u64 {
        self.task_id
    }
}

/// Projection stream of one model slot.
pub fn slot_stream(seed: u64, stream_task: u64, slot: SlotId) -> RngStream {
    RngStream::new(
        seed,
        StreamKey::new(Purpose::AdapterInit, stream_task, slot.layer as u64, slot.projection.code()),
    )
}

/// Single-matrix LoRI adapter whose projection stream is keyed by `(seed, task_id, layer 0, slot 0)`.
pub fn init_lori(shape: AdapterShape, alpha: f64, task_id: u64, seed: u64) -> Result<LoriAdapter> {
    let stream = RngStream::new(seed, StreamKey::new(Purpose::AdapterInit, task_id, 0, 0));
    LoriAdapter::init(shape, alpha, task_id, stream)
}

/// One LoRI adapter per model slot, each with its own `(seed, task, layer, projection)` stream.
pub fn init_lori_set(model: &ToyModel, r: usize, alpha: f64, task_id: u64, seed: u64) -> Result<Vec<LoriAdapter>> {
    init_lori_set_shared(model, r, alpha, task_id, task_id, seed)
}

/// Like [`init_lori_set`] but drawing projections from `stream_task`'s streams, so
/// several tasks can share identical frozen `A` matrices.
pub fn init_lori_set_shared(
    model: &ToyModel,
    r: usize,
    alpha: f64,
    stream_task: u64,
    task_id: u64,
    seed: u64,
) -> Result<Vec<LoriAdapter>> {
    model
        .slots()
        .iter()
        .enumerate()
        .map(|(i, &slot)| {
            let (d_in, d_out) = model.slot_dims(i);
            let shape = AdapterShape::new(d_in, d_out, r)?;
            LoriAdapter::init(shape, alpha, task_id, slot_stream(seed, stream_task, slot))
        })
        .collect()
}

/// One LoRA adapter per model slot. Uses the same streams as [`init_lori_set`], so a
/// LoRA set starts from exactly the projections of the LoRI set with the same task.
pub fn init_lora_set(model: &ToyModel, r: usize, alpha: f64, task_id: u64, seed: u64) -> Result<Vec<LoraAdapter>> {
    model
        .slots()
        .iter()
        .enumerate()
        .map(|(i, &slot)| {
            let (d_in, d_out) = model.slot_dims(i);
            let shape = AdapterShape::new(d_in, d_out, r)?;
            LoraAdapter::init(shape, alpha, task_id, slot_stream(seed, task_id, slot))
        })
        .collect()
}

/// `x W0 + x Δ`.
pub fn forward<T: LowRank>(x: &Matrix, w0: &Matrix, adapter: &T) -> Result<Matrix> {
    check_base(w0, adapter)?;
    x.matmul(w0)?.add(&x.matmul(&adapter.delta())?)
}

/// `W0 + Δ` as a new matrix.
pub fn merge_into_base<T: LowRank>(w0: &Matrix, adapter: &T) -> Result<Matrix> {
    check_base(w0, adapter)?;
    w0.add(&adapter.delta())
}

fn check_base<T: LowRank>(w0: &Matrix, adapter: &T) -> Result<()> {
    let s = adapter.shape();
    if w0.shape() != (s.d_in, s.d_out) {
        return Err(Error::Dimension { op: "base weight", left: w0.shape(), right: (s.d_in, s.d_out) });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCount {
    /// `A` and `B` entries.
    Lora,
    /// `B` entries.
    LoriDense,
    /// Set mask bits.
    LoriSparse,
}

/// Trainable parameter count of a model's adapters under each accounting rule.
pub fn count_trainable(adapters: &[LoriAdapter], kind: ParamCount) -> Result<usize> {
    let mut total = 0;
    for ad in adapters {
        let s = ad.shape();
        total += match kind {
            ParamCount::Lora => s.d_in * s.r + s.r * s.d_out,
            ParamCount::LoriDense => s.r * s.d_out,
            ParamCount::LoriSparse => {
                if !ad.is_calibrated() {
                    return Err(Error::state("sparse parameter count needs calibrated masks"));
                }
                ad.update_mask().count_ones()
            }
        };
    }
    Ok(total)
}
