//! Tape-based reverse-mode differentiation over a fixed set of matrix ops.
//!
//! Values are computed eagerly as nodes are recorded. [`GradGraph::replay`]
//! recomputes every derived node from the current leaf values, which is what the
//! finite-difference checks use.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node in a [`GradGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    /// Per row-block `Q_g K_g^T`.
    BlockMatMulT { q: Var, k: Var, block: usize },
    /// Per row-block `S_g V_g`.
    BlockMatMul { s: Var, v: Var, block: usize },
    MeanPool { x: Var, block: usize },
    Sum(Var),
    Mse { pred: Var, target: Matrix },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; a zero matrix when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension { op, left: a.shape(), right: b.shape() }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn block_matmul_t(q: &Matrix, k: &Matrix, block: usize) -> Matrix {
    let n = q.rows();
    let mut out = Matrix::zeros(n, block);
    for g in 0..n / block {
        for i in 0..block {
            let qi = q.row(g * block + i);
            for j in 0..block {
                out[(g * block + i, j)] = crate::matrix::dot(qi, k.row(g * block + j));
            }
        }
    }
    out
}

fn block_matmul(s: &Matrix, v: &Matrix, block: usize) -> Matrix {
    let n = s.rows();
    let d = v.cols();
    let mut out = Matrix::zeros(n, d);
    for g in 0..n / block {
        for i in 0..block {
            let row = g * block + i;
            for j in 0..block {
                let w = s[(row, j)];
                let v_row = v.row(g * block + j);
                let o_row = out.row_mut(row);
                for (o, &x) in o_row.iter_mut().zip(v_row) {
                    *o += w * x;
                }
            }
        }
    }
    out
}

fn mean_pool(x: &Matrix, block: usize) -> Matrix {
    let groups = x.rows() / block;
    let mut out = Matrix::zeros(groups, x.cols());
    let inv = 1.0 / block as f64;
    for g in 0..groups {
        for i in 0..block {
            let src = x.row(g * block + i);
            for (o, &v) in out.row_mut(g).iter_mut().zip(src) {
                *o += v;
            }
        }
        for o in out.row_mut(g) {
            *o *= inv;
        }
    }
    out
}

fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    let n = pred.len() as f64;
    pred.as_slice()
        .iter()
        .zip(target.as_slice())
        .fold(0.0, |acc, (p, t)| acc + (p - t) * (p - t))
        / n
}

fn cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + libm::log(row.iter().fold(0.0, |acc, &v| acc + libm::exp(v - max)));
        total += lse - row[y];
    }
    total / labels.len() as f64
}

impl GradGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// Overwrites a leaf or constant value. Call [`replay`](Self::replay) to propagate.
    pub fn set_value(&mut self, v: Var, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf | Op::Constant) {
            return Err(Error::arg("set_value on a derived node"));
        }
        if node.value.shape() != value.shape() {
            return Err(dim_err("set_value", &node.value, &value));
        }
        node.value = value;
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    fn check_blocks(&self, op: &'static str, a: Var, b: Var, block: usize) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if block == 0 || x.rows() % block != 0 || x.rows() != y.rows() {
            return Err(dim_err(op, x, y));
        }
        Ok(())
    }

    /// For each group of `block` consecutive rows, computes `Q_g K_g^T` (output `N x block`).
    pub fn block_matmul_t(&mut self, q: Var, k: Var, block: usize) -> Result<Var> {
        self.check_blocks("block_matmul_t", q, k, block)?;
        if self.value(q).cols() != self.value(k).cols() {
            return Err(dim_err("block_matmul_t", self.value(q), self.value(k)));
        }
        let value = block_matmul_t(self.value(q), self.value(k), block);
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(Op::BlockMatMulT { q, k, block }, value, rg))
    }

    /// For each group of `block` rows, computes `S_g V_g` where `S` is `N x block`.
    pub fn block_matmul(&mut self, s: Var, v: Var, block: usize) -> Result<Var> {
        self.check_blocks("block_matmul", s, v, block)?;
        if self.value(s).cols() != block {
            return Err(dim_err("block_matmul", self.value(s), self.value(v)));
        }
        let value = block_matmul(self.value(s), self.value(v), block);
        let rg = self.rg(s) || self.rg(v);
        Ok(self.push(Op::BlockMatMul { s, v, block }, value, rg))
    }

    /// Mean over each group of `block` consecutive rows.
    pub fn mean_pool(&mut self, x: Var, block: usize) -> Result<Var> {
        let xv = self.value(x);
        if block == 0 || xv.rows() % block != 0 {
            return Err(Error::arg(alloc::format!(
                "mean_pool block {block} does not divide {} rows",
                xv.rows()
            )));
        }
        let value = mean_pool(xv, block);
        let rg = self.rg(x);
        Ok(self.push(Op::MeanPool { x, block }, value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: Matrix) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(dim_err("mse", p, &target));
        }
        let value = Matrix::filled(1, 1, mse(p, &target));
        let rg = self.rg(pred);
        Ok(self.push(Op::Mse { pred, target }, value, rg))
    }

    /// Mean softmax cross-entropy against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != labels.len() || l.rows() == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: l.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= l.cols()) {
            return Err(Error::arg(alloc::format!(
                "label {bad} out of range for {} classes",
                l.cols()
            )));
        }
        let value = Matrix::filled(1, 1, cross_entropy(l, &labels));
        let rg = self.rg(logits);
        Ok(self.push(Op::CrossEntropy { logits, labels }, value, rg))
    }

    /// Recomputes every derived node from current leaf values.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            let value = {
                let v = |x: &Var| &self.nodes[x.0].value;
                match &self.nodes[i].op {
                    Op::Leaf | Op::Constant => continue,
                    Op::MatMul(a, b) => v(a).matmul(v(b)).expect("shapes fixed at record time"),
                    Op::Add(a, b) => v(a).add(v(b)).expect("shapes fixed at record time"),
                    Op::Mul(a, b) => v(a).hadamard(v(b)).expect("shapes fixed at record time"),
                    Op::Scale(a, s) => v(a).scale(*s),
                    Op::Relu(a) => v(a).map(|x| x.max(0.0)),
                    Op::SoftmaxRows(a) => softmax_rows(v(a)),
                    Op::BlockMatMulT { q, k, block } => block_matmul_t(v(q), v(k), *block),
                    Op::BlockMatMul { s, v: vv, block } => block_matmul(v(s), v(vv), *block),
                    Op::MeanPool { x, block } => mean_pool(v(x), *block),
                    Op::Sum(a) => Matrix::filled(1, 1, v(a).sum()),
                    Op::Mse { pred, target } => Matrix::filled(1, 1, mse(v(pred), target)),
                    Op::CrossEntropy { logits, labels } => {
                        Matrix::filled(1, 1, cross_entropy(v(logits), labels))
                    }
                }
            };
            self.nodes[i].value = value;
        }
    }

    /// Reverse-mode gradients of the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::arg(alloc::format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0,
                shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[i].take() else { continue };
            let emit = |target: Var, g: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.nodes[target.0].requires_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g).expect("gradient shape"),
                    slot @ None => *slot = Some(g),
                }
            };
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[i] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        emit(*a, upstream.matmul_t(val(b))?, &mut grads);
                    }
                    if self.rg(*b) {
                        emit(*b, val(a).t_matmul(&upstream)?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    emit(*a, upstream.clone(), &mut grads);
                    emit(*b, upstream, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        emit(*a, upstream.hadamard(val(b))?, &mut grads);
                    }
                    if self.rg(*b) {
                        emit(*b, upstream.hadamard(val(a))?, &mut grads);
                    }
                }
                Op::Scale(a, s) => emit(*a, upstream.scale(*s), &mut grads),
                Op::Relu(a) => {
                    let g = upstream.zip_map(val(a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    emit(*a, g, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut g = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot = crate::matrix::dot(upstream.row(r), y.row(r));
                        for c in 0..y.cols() {
                            g[(r, c)] = y[(r, c)] * (upstream[(r, c)] - dot);
                        }
                    }
                    emit(*a, g, &mut grads);
                }
                Op::BlockMatMulT { q, k, block } => {
                    let (qv, kv, b) = (val(q), val(k), *block);
                    let mut dq = Matrix::zeros(qv.rows(), qv.cols());
                    let mut dk = Matrix::zeros(kv.rows(), kv.cols());
                    for g in 0..qv.rows() / b {
                        for i in 0..b {
                            for j in 0..b {
                                let w = upstream[(g * b + i, j)];
                                for c in 0..qv.cols() {
                                    dq[(g * b + i, c)] += w * kv[(g * b + j, c)];
                                    dk[(g * b + j, c)] += w * qv[(g * b + i, c)];
                                }
                            }
                        }
                    }
                    emit(*q, dq, &mut grads);
                    emit(*k, dk, &mut grads);
                }
                Op::BlockMatMul { s, v, block } => {
                    let (sv, vv, b) = (val(s), val(v), *block);
                    let mut ds = Matrix::zeros(sv.rows(), sv.cols());
                    let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                    for g in 0..sv.rows() / b {
                        for i in 0..b {
                            let row = g * b + i;
                            for j in 0..b {
                                let src = g * b + j;
                                ds[(row, j)] = crate::matrix::dot(upstream.row(row), vv.row(src));
                                let w = sv[(row, j)];
                                for c in 0..vv.cols() {
                                    dv[(src, c)] += w * upstream[(row, c)];
                                }
                            }
                        }
                    }
                    emit(*s, ds, &mut grads);
                    emit(*v, dv, &mut grads);
                }
                Op::MeanPool { x, block } => {
                    let xv = val(x);
                    let inv = 1.0 / *block as f64;
                    let g = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| {
                        upstream[(r / block, c)] * inv
                    });
                    emit(*x, g, &mut grads);
                }
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    emit(*a, Matrix::filled(r, c, upstream[(0, 0)]), &mut grads);
                }
                Op::Mse { pred, target } => {
                    let p = val(pred);
                    let k = 2.0 * upstream[(0, 0)] / p.len() as f64;
                    emit(*pred, p.zip_map(target, "mse", |p, t| k * (p - t))?, &mut grads);
                }
                Op::CrossEntropy { logits, labels } => {
                    let mut g = softmax_rows(val(logits));
                    let k = upstream[(0, 0)] / labels.len() as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        g[(r, y)] -= 1.0;
                    }
                    emit(*logits, g.scale(k), &mut grads);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        // Only leaves keep gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = GradGraph::new();
        let x0 = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let x = g.leaf(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x), x0.scale(2.0));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = GradGraph::new();
        let x = g.leaf(Matrix::filled(2, 2, 1.0));
        let dead = g.leaf(Matrix::filled(3, 1, 4.0));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(dead), Matrix::zeros(3, 1));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = GradGraph::new();
        let x = g.leaf(Matrix::filled(2, 2, 1.0));
        assert!(matches!(g.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn replay_reproduces_loss() {
        let mut g = GradGraph::new();
        let x = g.constant(Matrix::from_rows(&[[0.3, -0.7, 1.1]]));
        let w = g.leaf(Matrix::from_fn(3, 2, |i, j| (i as f64) * 0.4 - (j as f64) * 0.3));
        let h = g.matmul(x, w).unwrap();
        let s = g.softmax_rows(h);
        let loss = g.cross_entropy(s, alloc::vec![1]).unwrap();
        let before = g.scalar(loss);
        g.replay();
        assert_eq!(g.scalar(loss).to_bits(), before.to_bits());
    }

    #[test]
    fn block_ops_reject_bad_blocks() {
        let mut g = GradGraph::new();
        let q = g.leaf(Matrix::zeros(6, 2));
        assert!(g.block_matmul_t(q, q, 4).is_err());
        assert!(g.mean_pool(q, 4).is_err());
        assert!(g.block_matmul_t(q, q, 3).is_ok());
    }
}
