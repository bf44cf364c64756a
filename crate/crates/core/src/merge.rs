//! Combining several task adapters into one set of weights.
//!
//! All methods work on each adapter's factors `(scale · A, B ⊙ M)`. Concatenated
//! merging stacks the weighted factors so that `A'B' = Σ α_t Δ_t`; linear merging
//! sums the factors before multiplying and therefore picks up cross-terms. The
//! pruning baselines sparsify the factors first and then merge by concatenation
//! (TIES instead resolves sign conflicts coordinate-wise on the deltas).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::adapter::LowRank;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ToyModel;
use crate::rng::{Purpose, RngStream, StreamKey, StreamRng};
use crate::select::{retained_count, top_k_membership};
use crate::task::TaskDataset;
use crate::train::evaluate_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MergeMethod {
    Concat,
    Linear,
    Magnitude,
    Ties,
    Dare,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] =
        [MergeMethod::Concat, MergeMethod::Linear, MergeMethod::Magnitude, MergeMethod::Ties, MergeMethod::Dare];

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Concat => "concat",
            MergeMethod::Linear => "linear",
            MergeMethod::Magnitude => "magnitude",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::arg(alloc::format!("unknown merge method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// One weight `α_t` per adapter.
    pub weights: Vec<f64>,
    /// Kept fraction for pruning methods, in `(0, 1]`.
    pub density: f64,
    /// Base seed for DARE drops.
    pub seed: u64,
}

impl MergeSpec {
    pub fn new(method: MergeMethod, weights: Vec<f64>) -> Self {
        Self { method, weights, density: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::arg("merge weights must be finite"));
        }
        check_density(self.density)
    }
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::arg(alloc::format!("density must be in (0, 1], got {density}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub spec: MergeSpec,
    pub adapter_ids: Vec<u64>,
}

/// Merged weights per model slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub weights: Vec<Matrix>,
    pub provenance: Provenance,
}

/// Scaled factors `(scale · A, B ⊙ M)` of one adapter slot.
pub type Factors = (Matrix, Matrix);

/// `W0 + [α_1 A_1 … α_T A_T] [B_1; …; B_T]`.
pub fn concat_slot(w0: &Matrix, factors: &[Factors], weights: &[f64]) -> Result<Matrix> {
    let a_parts: Vec<Matrix> = factors.iter().zip(weights).map(|((a, _), &w)| a.scale(w)).collect();
    let a_refs: Vec<&Matrix> = a_parts.iter().collect();
    let b_refs: Vec<&Matrix> = factors.iter().map(|(_, b)| b).collect();
    let a_cat = Matrix::hcat(&a_refs)?;
    let b_cat = Matrix::vcat(&b_refs)?;
    w0.add(&a_cat.matmul(&b_cat)?)
}

/// `W0 + Σ α_t (A_t B_t)`, the explicit delta-sum form of [`concat_slot`].
pub fn delta_sum_slot(w0: &Matrix, factors: &[Factors], weights: &[f64]) -> Result<Matrix> {
    let mut acc = Matrix::zeros(w0.rows(), w0.cols());
    for ((a, b), &w) in factors.iter().zip(weights) {
        acc.axpy(w, &a.matmul(b)?)?;
    }
    w0.add(&acc)
}

/// `W0 + (Σ α_t A_t)(Σ α_t B_t)`.
pub fn linear_slot(w0: &Matrix, factors: &[Factors], weights: &[f64]) -> Result<Matrix> {
    let (a0, b0) = &factors[0];
    let mut a_sum = Matrix::zeros(a0.rows(), a0.cols());
    let mut b_sum = Matrix::zeros(b0.rows(), b0.cols());
    for ((a, b), &w) in factors.iter().zip(weights) {
        a_sum.axpy(w, a)?;
        b_sum.axpy(w, b)?;
    }
    w0.add(&a_sum.matmul(&b_sum)?)
}

/// `Σ_{s≠t} α_s α_t A_s B_t`: what linear merging adds on top of concatenation.
pub fn cross_terms_slot(factors: &[Factors], weights: &[f64]) -> Result<Matrix> {
    let (a0, b0) = &factors[0];
    let mut acc = Matrix::zeros(a0.rows(), b0.cols());
    for (s, (a_s, _)) in factors.iter().enumerate() {
        for (t, (_, b_t)) in factors.iter().enumerate() {
            if s != t {
                acc.axpy(weights[s] * weights[t], &a_s.matmul(b_t)?)?;
            }
        }
    }
    Ok(acc)
}

/// Keeps the `ceil(density · N)` largest-magnitude entries.
pub fn magnitude_prune(m: &Matrix, density: f64) -> Result<Matrix> {
    check_density(density)?;
    let keep = top_k_membership(m.as_slice(), retained_count(1.0 - density, m.len()));
    let mut out = m.clone();
    for (v, k) in out.as_mut_slice().iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Keeps each entry with probability `density`, rescaled by `1 / density`.
pub fn dare_drop(m: &Matrix, density: f64, rng: &mut StreamRng) -> Result<Matrix> {
    check_density(density)?;
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        *v = if rng.uniform() < density { *v / density } else { 0.0 };
    }
    Ok(out)
}

/// TIES on weighted deltas: elect the sign of the coordinate sum (zero counts as
/// positive) and average the nonzero values carrying that sign.
pub fn ties_slot(w0: &Matrix, factors: &[Factors], weights: &[f64]) -> Result<Matrix> {
    let deltas: Vec<Matrix> = factors
        .iter()
        .zip(weights)
        .map(|((a, b), &w)| a.matmul(b).map(|d| d.scale(w)))
        .collect::<Result<_>>()?;
    let mut merged = Matrix::zeros(w0.rows(), w0.cols());
    for (i, out) in merged.as_mut_slice().iter_mut().enumerate() {
        *out = ties_coordinate(deltas.iter().map(|d| d.as_slice()[i]));
    }
    w0.add(&merged)
}

/// Sign election and disjoint mean for one coordinate.
pub fn ties_coordinate(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let positive = values.clone().fold(0.0, |acc, v| acc + v) >= 0.0;
    let (sum, count) = values
        .filter(|&v| if positive { v > 0.0 } else { v < 0.0 })
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn validate_inputs<T: LowRank>(base: &[Matrix], adapters: &[&[T]], weights: &[f64]) -> Result<()> {
    if adapters.is_empty() {
        return Err(Error::Merge(String::from("nothing to merge")));
    }
    if weights.len() != adapters.len() {
        return Err(Error::Merge(alloc::format!(
            "{} weights for {} adapters",
            weights.len(),
            adapters.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::arg("merge weights must be finite"));
    }
    for (t, ad) in adapters.iter().enumerate() {
        if ad.len() != base.len() {
            return Err(Error::Merge(alloc::format!(
                "adapter {t} covers {} slots, model has {}",
                ad.len(),
                base.len()
            )));
        }
        for (slot, (w0, a)) in base.iter().zip(ad.iter()).enumerate() {
            let s = a.shape();
            let s0 = adapters[0][slot].shape();
            if w0.shape() != (s.d_in, s.d_out) || s.d_in != s0.d_in || s.d_out != s0.d_out {
                return Err(Error::Merge(alloc::format!(
                    "adapter {t} slot {slot} is {}x{}, expected {}x{}",
                    s.d_in,
                    s.d_out,
                    w0.rows(),
                    w0.cols()
                )));
            }
        }
    }
    Ok(())
}

fn slot_factors<T: LowRank>(adapters: &[&[T]], slot: usize) -> Vec<Factors> {
    adapters.iter().map(|ad| ad[slot].factors()).collect()
}

fn finish<T: LowRank>(weights: Vec<Matrix>, adapters: &[&[T]], spec: MergeSpec) -> MergedModel {
    MergedModel {
        weights,
        provenance: Provenance { spec, adapter_ids: adapters.iter().map(|a| a[0].task_id()).collect() },
    }
}

/// Runs the method named in `spec`.
pub fn merge<T: LowRank>(base: &[Matrix], adapters: &[&[T]], spec: &MergeSpec) -> Result<MergedModel> {
    spec.validate()?;
    validate_inputs(base, adapters, &spec.weights)?;
    let w = &spec.weights;
    let mut out = Vec::with_capacity(base.len());
    for (slot, w0) in base.iter().enumerate() {
        let factors = slot_factors(adapters, slot);
        let merged = match spec.method {
            MergeMethod::Concat => concat_slot(w0, &factors, w)?,
            MergeMethod::Linear => linear_slot(w0, &factors, w)?,
            MergeMethod::Magnitude => {
                let pruned = factors
                    .iter()
                    .map(|(a, b)| Ok((magnitude_prune(a, spec.density)?, magnitude_prune(b, spec.density)?)))
                    .collect::<Result<Vec<_>>>()?;
                concat_slot(w0, &pruned, w)?
            }
            MergeMethod::Ties => {
                let pruned = factors
                    .iter()
                    .map(|(a, b)| Ok((magnitude_prune(a, spec.density)?, magnitude_prune(b, spec.density)?)))
                    .collect::<Result<Vec<_>>>()?;
                ties_slot(w0, &pruned, w)?
            }
            MergeMethod::Dare => {
                let dropped = factors
                    .iter()
                    .zip(adapters)
                    .map(|((a, b), ad)| {
                        let task = ad[slot].task_id();
                        let mut rng_a = dare_stream(spec.seed, task, slot, 0).rng();
                        let mut rng_b = dare_stream(spec.seed, task, slot, 1).rng();
                        Ok((dare_drop(a, spec.density, &mut rng_a)?, dare_drop(b, spec.density, &mut rng_b)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                concat_slot(w0, &dropped, w)?
            }
        };
        out.push(merged);
    }
    Ok(finish(out, adapters, spec.clone()))
}

fn dare_stream(seed: u64, task: u64, slot: usize, factor: u64) -> RngStream {
    RngStream::new(seed, StreamKey::new(Purpose::Dare, task, slot as u64, factor))
}

pub fn merge_concat<T: LowRank>(base: &[Matrix], adapters: &[&[T]], weights: &[f64]) -> Result<MergedModel> {
    merge(base, adapters, &MergeSpec::new(MergeMethod::Concat, weights.to_vec()))
}

/// Same result as [`merge_concat`] computed as an explicit sum of deltas.
pub fn merge_delta_sum<T: LowRank>(base: &[Matrix], adapters: &[&[T]], weights: &[f64]) -> Result<MergedModel> {
    validate_inputs(base, adapters, weights)?;
    let out = base
        .iter()
        .enumerate()
        .map(|(slot, w0)| delta_sum_slot(w0, &slot_factors(adapters, slot), weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(out, adapters, MergeSpec::new(MergeMethod::Concat, weights.to_vec())))
}

pub fn merge_linear<T: LowRank>(base: &[Matrix], adapters: &[&[T]], weights: &[f64]) -> Result<MergedModel> {
    merge(base, adapters, &MergeSpec::new(MergeMethod::Linear, weights.to_vec()))
}

/// Per-slot cross-term sums of linear merging.
pub fn linear_cross_terms<T: LowRank>(adapters: &[&[T]], weights: &[f64]) -> Result<Vec<Matrix>> {
    let slots = adapters.first().map_or(0, |a| a.len());
    (0..slots).map(|slot| cross_terms_slot(&slot_factors(adapters, slot), weights)).collect()
}

pub fn merge_magnitude<T: LowRank>(
    base: &[Matrix],
    adapters: &[&[T]],
    weights: &[f64],
    density: f64,
) -> Result<MergedModel> {
    let spec = MergeSpec { density, ..MergeSpec::new(MergeMethod::Magnitude, weights.to_vec()) };
    merge(base, adapters, &spec)
}

pub fn merge_ties<T: LowRank>(base: &[Matrix], adapters: &[&[T]], weights: &[f64], density: f64) -> Result<MergedModel> {
    let spec = MergeSpec { density, ..MergeSpec::new(MergeMethod::Ties, weights.to_vec()) };
    merge(base, adapters, &spec)
}

pub fn merge_dare<T: LowRank>(
    base: &[Matrix],
    adapters: &[&[T]],
    weights: &[f64],
    density: f64,
    seed: u64,
) -> Result<MergedModel> {
    let spec = MergeSpec { density, seed, ..MergeSpec::new(MergeMethod::Dare, weights.to_vec()) };
    merge(base, adapters, &spec)
}

/// `<Δ_s, Δ_t>_F / (‖Δ_s‖_F ‖Δ_t‖_F)` summed over all slots; `None` if either delta is zero.
pub fn normalized_delta_inner<S: LowRank, T: LowRank>(a: &[S], b: &[T]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::arg("adapters cover different slot counts"));
    }
    let (mut inner, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x.delta(), y.delta());
        inner += dx.frob_inner(&dy)?;
        na += dx.frob_inner(&dx)?;
        nb += dy.frob_inner(&dy)?;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some(inner / (libm::sqrt(na) * libm::sqrt(nb))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInterference {
    pub task_id: u64,
    pub merged_loss: f64,
    pub single_loss: f64,
    /// `merged_loss - single_loss`.
    pub interference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceReport {
    pub tasks: Vec<TaskInterference>,
    /// `(task_s, task_t, normalized inner product)` for `s < t`; `None` for zero deltas.
    pub pairs: Vec<(u64, u64, Option<f64>)>,
}

impl InterferenceReport {
    pub fn mean(&self) -> f64 {
        self.tasks.iter().map(|t| t.interference).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Excess loss of the merged model over each task's own weighted adapter.
///
/// The single-task reference is the concatenated merge of that adapter alone at its weight.
pub fn interference<T: LowRank>(
    model: &ToyModel,
    merged: &MergedModel,
    adapters: &[&[T]],
    datasets: &[TaskDataset],
    weights: &[f64],
) -> Result<InterferenceReport> {
    validate_inputs(model.base_weights(), adapters, weights)?;
    let mut tasks = Vec::with_capacity(adapters.len());
    for (ad, &w) in adapters.iter().zip(weights) {
        let id = ad[0].task_id();
        let ds = datasets
            .iter()
            .find(|d| d.task_id == id)
            .ok_or_else(|| Error::arg(alloc::format!("no dataset for task {id}")))?;
        let single = merge_concat(model.base_weights(), &[*ad], &[w])?;
        let merged_loss = evaluate_weights(model, &merged.weights, ds)?.loss;
        let single_loss = evaluate_weights(model, &single.weights, ds)?.loss;
        tasks.push(TaskInterference { task_id: id, merged_loss, single_loss, interference: merged_loss - single_loss });
    }
    let mut pairs = Vec::new();
    for s in 0..adapters.len() {
        for t in s + 1..adapters.len() {
            pairs.push((adapters[s][0].task_id(), adapters[t][0].task_id(), normalized_delta_inner(adapters[s], adapters[t])?));
        }
    }
    Ok(InterferenceReport { tasks, pairs })
}
