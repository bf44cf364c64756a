//! Synthetic task families standing in for real fine-tuning datasets.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ToyModel;
use crate::rng::{Purpose, RngStream, StreamKey, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Base-model output plus a random low-rank linear map of the pooled input.
    LinearRegression,
    /// Tokens scattered around one of `out_dim` class centres.
    ClusterClassification,
    /// Regress the features of the one marked token in each sequence.
    SequenceCopy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LinearRegression => "linear_regression",
            TaskKind::ClusterClassification => "cluster_classification",
            TaskKind::SequenceCopy => "sequence_copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_regression" => Ok(TaskKind::LinearRegression),
            "cluster_classification" => Ok(TaskKind::ClusterClassification),
            "sequence_copy" => Ok(TaskKind::SequenceCopy),
            other => Err(Error::arg(alloc::format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of sequences.
    pub size: usize,
    /// Target noise std (regression) or token noise std (classification).
    pub noise: f64,
    pub seed: u64,
    pub task_id: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, size: usize, noise: f64, seed: u64, task_id: u64) -> Self {
        Self { kind, size, noise, seed, task_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.rows(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn loss_kind(&self) -> LossKind {
        match self {
            Targets::Values(_) => LossKind::Mse,
            Targets::Classes(_) => LossKind::CrossEntropy,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(m) => {
                let mut data = Vec::with_capacity(idx.len() * m.cols());
                for &i in idx {
                    data.extend_from_slice(m.row(i));
                }
                Targets::Values(Matrix::from_vec(idx.len(), m.cols(), data).expect("row gather"))
            }
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: u64,
    pub kind: Option<TaskKind>,
    /// `(len * seq_len) x width` token rows.
    pub inputs: Matrix,
    pub targets: Targets,
    pub seq_len: usize,
}

impl TaskDataset {
    pub fn new(task_id: u64, inputs: Matrix, targets: Targets, seq_len: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::arg("dataset is empty"));
        }
        if seq_len == 0 || inputs.rows() != targets.len() * seq_len {
            return Err(Error::Dimension {
                op: "dataset",
                left: inputs.shape(),
                right: (targets.len(), seq_len),
            });
        }
        Ok(Self { task_id, kind: None, inputs, targets, seq_len })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn loss_kind(&self) -> LossKind {
        self.targets.loss_kind()
    }

    /// Sub-dataset of the given sequences, in the given order.
    pub fn select(&self, idx: &[usize]) -> TaskDataset {
        let mut data = Vec::with_capacity(idx.len() * self.seq_len * self.inputs.cols());
        for &i in idx {
            for t in 0..self.seq_len {
                data.extend_from_slice(self.inputs.row(i * self.seq_len + t));
            }
        }
        TaskDataset {
            task_id: self.task_id,
            kind: self.kind,
            inputs: Matrix::from_vec(idx.len() * self.seq_len, self.inputs.cols(), data).expect("row gather"),
            targets: self.targets.select(idx),
            seq_len: self.seq_len,
        }
    }

    /// First `n` sequences.
    pub fn head(&self, n: usize) -> TaskDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Mean over each sequence's tokens.
pub fn pooled_inputs(inputs: &Matrix, seq_len: usize) -> Matrix {
    let n = inputs.rows() / seq_len;
    let mut out = Matrix::zeros(n, inputs.cols());
    for s in 0..n {
        for t in 0..seq_len {
            for (o, &v) in out.row_mut(s).iter_mut().zip(inputs.row(s * seq_len + t)) {
                *o += v;
            }
        }
        for o in out.row_mut(s) {
            *o /= seq_len as f64;
        }
    }
    out
}

/// Rank of the regression task's linear bump.
const BUMP_RANK: usize = 2;
/// Distance scale between class centres.
const CLUSTER_SEPARATION: f64 = 1.5;
/// Task id reserved for the family-wide stream.
const FAMILY_TASK: u64 = u64::MAX;
/// Channel-0 value flagging the token to copy.
const COPY_MARKER: f64 = 4.0;

fn rng_for(spec: &TaskSpec, stream: u64) -> StreamRng {
    RngStream::new(spec.seed, StreamKey::new(Purpose::TaskData, spec.task_id, spec.kind as u64, stream)).rng()
}

/// Stream shared by every task of the same kind and seed.
fn family_rng(spec: &TaskSpec) -> StreamRng {
    RngStream::new(spec.seed, StreamKey::new(Purpose::TaskData, FAMILY_TASK, spec.kind as u64, 0)).rng()
}

/// Generates a dataset for `model`'s input/output shapes. Deterministic in `(spec, model)`.
pub fn gen_task(spec: &TaskSpec, model: &ToyModel) -> Result<TaskDataset> {
    if spec.size == 0 {
        return Err(Error::arg("task size must be positive"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::arg("task noise must be finite and non-negative"));
    }
    let cfg = model.config();
    let (d, seq, out) = (cfg.width, cfg.seq_len, cfg.out_dim);
    let mut task_rng = rng_for(spec, 0);
    let mut sample_rng = rng_for(spec, 1);
    let mut noise_rng = rng_for(spec, 2);

    let (inputs, targets) = match spec.kind {
        TaskKind::LinearRegression => {
            let inputs = sample_rng.normal_matrix(spec.size * seq, d, 1.0);
            // Bump = pooled · (U Vᵀ + U' V'ᵀ) / √2 with one family-wide and one
            // task-specific term, scaled so its entries have roughly unit variance.
            let mut family_rng = family_rng(spec);
            let u = family_rng.normal_matrix(d, BUMP_RANK, 1.0);
            let v = family_rng.normal_matrix(out, BUMP_RANK, 1.0);
            let u_t = task_rng.normal_matrix(d, BUMP_RANK, 1.0);
            let v_t = task_rng.normal_matrix(out, BUMP_RANK, 1.0);
            let map = u
                .matmul_t(&v)?
                .add(&u_t.matmul_t(&v_t)?)?
                .scale(libm::sqrt(seq as f64 / (2 * d * BUMP_RANK) as f64));
            let bump = pooled_inputs(&inputs, seq).matmul(&map)?;
            let base = model.predict(&inputs, model.base_weights())?;
            let mut y = base.add(&bump)?;
            if spec.noise > 0.0 {
                y.axpy(spec.noise, &noise_rng.normal_matrix(y.rows(), y.cols(), 1.0))?;
            }
            (inputs, Targets::Values(y))
        }
        TaskKind::ClusterClassification => {
            let centres = task_rng.normal_matrix(out, d, CLUSTER_SEPARATION);
            let mut inputs = Matrix::zeros(spec.size * seq, d);
            let mut labels = Vec::with_capacity(spec.size);
            let token_noise = if spec.noise > 0.0 { spec.noise } else { 1.0 };
            for s in 0..spec.size {
                let y = sample_rng.below(out);
                labels.push(y);
                for t in 0..seq {
                    let row = inputs.row_mut(s * seq + t);
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = centres[(y, j)] + token_noise * sample_rng.normal();
                    }
                }
            }
            (inputs, Targets::Classes(labels))
        }
        TaskKind::SequenceCopy => {
            if d < out + 1 {
                return Err(Error::arg("sequence_copy needs width > out_dim"));
            }
            let mut inputs = sample_rng.normal_matrix(spec.size * seq, d, 1.0);
            let mut y = Matrix::zeros(spec.size, out);
            for s in 0..spec.size {
                let pos = sample_rng.below(seq);
                for t in 0..seq {
                    inputs[(s * seq + t, 0)] = if t == pos { COPY_MARKER } else { 0.0 };
                }
                for j in 0..out {
                    y[(s, j)] = inputs[(s * seq + pos, 1 + j)];
                }
            }
            if spec.noise > 0.0 {
                y.axpy(spec.noise, &noise_rng.normal_matrix(y.rows(), y.cols(), 1.0))?;
            }
            (inputs, Targets::Values(y))
        }
    };
    let mut ds = TaskDataset::new(spec.task_id, inputs, targets, seq)?;
    ds.kind = Some(spec.kind);
    Ok(ds)
}
