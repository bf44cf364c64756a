//! Frozen toy transformer used as the base model for every experiment.
//!
//! Each layer is a single-head attention block followed by a ReLU feed-forward
//! block, both residual. Inputs are `(batch * seq_len) x width` token matrices;
//! the output head reads the mean-pooled final residual stream.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{GradGraph, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{Purpose, RngStream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnUp,
    FfnDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleKind {
    Attention,
    Feedforward,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Attention => "attn",
            ModuleKind::Feedforward => "ffn",
        }
    }
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::AttnQ,
        Projection::AttnK,
        Projection::AttnV,
        Projection::AttnO,
        Projection::FfnUp,
        Projection::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::AttnQ => "attn.q",
            Projection::AttnK => "attn.k",
            Projection::AttnV => "attn.v",
            Projection::AttnO => "attn.o",
            Projection::FfnUp => "ffn.up",
            Projection::FfnDown => "ffn.down",
        }
    }

    pub fn module(self) -> ModuleKind {
        match self {
            Projection::FfnUp | Projection::FfnDown => ModuleKind::Feedforward,
            _ => ModuleKind::Attention,
        }
    }

    pub fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::arg(alloc::format!("unknown projection `{s}`")))
    }
}

/// One adaptable weight matrix: `(layer, projection)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId {
    pub layer: usize,
    pub projection: Projection,
}

impl SlotId {
    pub fn new(layer: usize, projection: Projection) -> Self {
        Self { layer, projection }
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.projection)
    }
}

impl FromStr for SlotId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::arg(alloc::format!("bad slot name `{s}`"));
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let (layer, proj) = rest.split_once('.').ok_or_else(bad)?;
        Ok(SlotId { layer: layer.parse().map_err(|_| bad())?, projection: proj.parse()? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub seq_len: usize,
    pub out_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// `ffn_width = 2 * width`, four outputs.
    pub fn new(layers: usize, width: usize, seq_len: usize, seed: u64) -> Self {
        Self { layers, width, ffn_width: 2 * width, seq_len, out_dim: 4, seed }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(2, 32, 8, 0)
    }
}

/// Low-rank factors of one slot as graph nodes: contributes `scale * (x A) B`.
#[derive(Debug, Clone, Copy)]
pub struct FactorVars {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    slots: Vec<SlotId>,
    weights: Vec<Matrix>,
    head: Matrix,
}

/// Base-weight init gain relative to Kaiming variance; keeps the residual stream tame.
const BASE_GAIN: f64 = 0.5;

impl ToyModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        if config.layers < 1 || config.width < 4 {
            return Err(Error::arg(alloc::format!(
                "toy model needs layers >= 1 and width >= 4, got {} and {}",
                config.layers,
                config.width
            )));
        }
        if config.seq_len < 1 || config.ffn_width < 1 || config.out_dim < 1 {
            return Err(Error::arg("seq_len, ffn_width and out_dim must be positive"));
        }
        let mut slots = Vec::new();
        let mut weights = Vec::new();
        for layer in 0..config.layers {
            for projection in Projection::ALL {
                let slot = SlotId::new(layer, projection);
                let (d_in, d_out) = slot_dims(&config, projection);
                let key = StreamKey::new(Purpose::BaseModel, 0, layer as u64, projection.code());
                let mut rng = RngStream::new(config.seed, key).rng();
                let std = BASE_GAIN / libm::sqrt(d_in as f64);
                weights.push(rng.normal_matrix(d_in, d_out, std));
                slots.push(slot);
            }
        }
        let key = StreamKey::new(Purpose::BaseModel, 0, u64::MAX, 0);
        let head = RngStream::new(config.seed, key)
            .rng()
            .normal_matrix(config.width, config.out_dim, 1.0 / libm::sqrt(config.width as f64));
        Ok(Self { config, slots, weights, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn slots(&self) -> &[SlotId] {
        &self.slots
    }

    pub fn slot_index(&self, slot: SlotId) -> Option<usize> {
        self.slots.iter().position(|&s| s == slot)
    }

    /// `(d_in, d_out)` of a slot's weight.
    pub fn slot_dims(&self, index: usize) -> (usize, usize) {
        self.weights[index].shape()
    }

    pub fn base_weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    /// Replaces the output head (used by tests that need a particular head).
    pub fn with_head(mut self, head: Matrix) -> Result<Self> {
        if head.shape() != self.head.shape() {
            return Err(Error::Dimension { op: "with_head", left: self.head.shape(), right: head.shape() });
        }
        self.head = head;
        Ok(self)
    }

    fn check_weights(&self, weights: &[Matrix]) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::arg(alloc::format!(
                "expected {} slot weights, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        for (w, base) in weights.iter().zip(&self.weights) {
            if w.shape() != base.shape() {
                return Err(Error::Dimension { op: "slot weights", left: base.shape(), right: w.shape() });
            }
        }
        Ok(())
    }

    /// Records the forward pass into `g` and returns the `batch x out_dim` output node.
    ///
    /// `weights` overrides the base weights per slot (e.g. a merged model); `factors`
    /// holds optional low-rank adapter nodes per slot.
    pub fn forward_graph(
        &self,
        g: &mut GradGraph,
        input: &Matrix,
        weights: &[Matrix],
        factors: &[Option<FactorVars>],
    ) -> Result<Var> {
        let cfg = &self.config;
        self.check_weights(weights)?;
        if input.cols() != cfg.width || input.rows() % cfg.seq_len != 0 || input.rows() == 0 {
            return Err(Error::Dimension {
                op: "model input",
                left: input.shape(),
                right: (cfg.seq_len, cfg.width),
            });
        }
        if factors.len() != self.slots.len() {
            return Err(Error::arg(alloc::format!(
                "expected {} adapter slots, got {}",
                self.slots.len(),
                factors.len()
            )));
        }
        let weight_vars: Vec<Var> = weights.iter().map(|w| g.constant(w.clone())).collect();
        let project = |g: &mut GradGraph, x: Var, idx: usize| -> Result<Var> {
            let base = g.matmul(x, weight_vars[idx])?;
            match factors[idx] {
                None => Ok(base),
                Some(f) => {
                    let xa = g.matmul(x, f.a)?;
                    let xab = g.matmul(xa, f.b)?;
                    let scaled = g.scale(xab, f.scale);
                    g.add(base, scaled)
                }
            }
        };
        let attn_scale = 1.0 / libm::sqrt(cfg.width as f64);
        let mut x = g.constant(input.clone());
        for layer in 0..cfg.layers {
            let base = layer * Projection::ALL.len();
            let q = project(g, x, base)?;
            let k = project(g, x, base + 1)?;
            let v = project(g, x, base + 2)?;
            let scores = g.block_matmul_t(q, k, cfg.seq_len)?;
            let scores = g.scale(scores, attn_scale);
            let attn = g.softmax_rows(scores);
            let mixed = g.block_matmul(attn, v, cfg.seq_len)?;
            let o = project(g, mixed, base + 3)?;
            x = g.add(x, o)?;
            let up = project(g, x, base + 4)?;
            let hidden = g.relu(up);
            let down = project(g, hidden, base + 5)?;
            x = g.add(x, down)?;
        }
        let pooled = g.mean_pool(x, cfg.seq_len)?;
        let head = g.constant(self.head.clone());
        g.matmul(pooled, head)
    }

    /// Forward pass with the given slot weights and no adapters.
    pub fn predict(&self, input: &Matrix, weights: &[Matrix]) -> Result<Matrix> {
        let mut g = GradGraph::new();
        let none = alloc::vec![None; self.slots.len()];
        let out = self.forward_graph(&mut g, input, weights, &none)?;
        Ok(g.value(out).clone())
    }
}

fn slot_dims(cfg: &ModelConfig, p: Projection) -> (usize, usize) {
    match p {
        Projection::FfnUp => (cfg.width, cfg.ffn_width),
        Projection::FfnDown => (cfg.ffn_width, cfg.width),
        _ => (cfg.width, cfg.width),
    }
}

/// Convenience constructor with the default feed-forward width and output size.
pub fn build_toy_model(layers: usize, width: usize, seq_len: usize, seed: u64) -> Result<ToyModel> {
    ToyModel::build(ModelConfig::new(layers, width, seq_len, seed))
}
