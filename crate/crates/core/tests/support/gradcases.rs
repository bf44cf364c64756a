//! Finite-difference oracle and random graph cases for gradient checks.

use lori_core::autodiff::{GradGraph, Var};
use lori_core::model::FactorVars;
use lori_core::rng::StreamRng;
use lori_core::{build_toy_model, Purpose, RngStream, StreamKey};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

pub fn rng(case: u64) -> StreamRng {
    RngStream::new(17, StreamKey::new(Purpose::Scratch, case, 0, 0)).rng()
}

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all leaves.
pub fn fd_relative_error(g: &mut GradGraph, loss: Var, leaves: &[Var]) -> f64 {
    let grads = g.backward(loss).unwrap();
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for &leaf in leaves {
        let analytic = grads.get(leaf);
        let original = g.value(leaf).clone();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus.as_mut_slice()[i] += STEP;
            g.set_value(leaf, plus).unwrap();
            g.replay();
            let up = g.scalar(loss);
            let mut minus = original.clone();
            minus.as_mut_slice()[i] -= STEP;
            g.set_value(leaf, minus).unwrap();
            g.replay();
            let down = g.scalar(loss);
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.as_slice()[i];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nf += numeric * numeric;
        }
        g.set_value(leaf, original).unwrap();
        g.replay();
    }
    let denom = na.sqrt().max(nf.sqrt());
    assert!(denom > 0.0, "degenerate check: all gradients are zero");
    diff.sqrt() / denom
}

pub fn labels(rng: &mut StreamRng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}

/// Dense chain: matmul, add, relu, elementwise product, scale, then mse or cross-entropy.
pub fn dense_case(case: u64) -> (GradGraph, Var, Vec<Var>) {
    let mut r = rng(case);
    let (n, m, p, q) = (2 + r.below(4), 2 + r.below(4), 2 + r.below(5), 2 + r.below(4));
    let mut g = GradGraph::new();
    let x = g.leaf(r.normal_matrix(n, m, 1.0));
    let w1 = g.leaf(r.normal_matrix(m, p, 0.7));
    let b1 = g.leaf(r.normal_matrix(n, p, 0.3));
    let w2 = g.leaf(r.normal_matrix(p, q, 0.7));
    let gate = g.leaf(r.normal_matrix(n, q, 1.0));
    let h = g.matmul(x, w1).unwrap();
    let h = g.add(h, b1).unwrap();
    let h = g.relu(h);
    let y = g.matmul(h, w2).unwrap();
    let y = g.mul(y, gate).unwrap();
    let y = g.scale(y, 0.8);
    let loss = if case % 2 == 0 {
        let target = r.normal_matrix(n, q, 1.0);
        g.mse(y, target).unwrap()
    } else {
        let l = labels(&mut r, n, q);
        g.cross_entropy(y, l).unwrap()
    };
    (g, loss, vec![x, w1, b1, w2, gate])
}

/// Single attention block over `block`-row sequences, pooled and summed or classified.
pub fn attention_case(case: u64) -> (GradGraph, Var, Vec<Var>) {
    let mut r = rng(case);
    let block = 2 + r.below(3);
    let seqs = 1 + r.below(3);
    let d = 3 + r.below(3);
    let mut g = GradGraph::new();
    let x = g.leaf(r.normal_matrix(seqs * block, d, 1.0));
    let wq = g.leaf(r.normal_matrix(d, d, 0.5));
    let wk = g.leaf(r.normal_matrix(d, d, 0.5));
    let wv = g.leaf(r.normal_matrix(d, d, 0.5));
    let q = g.matmul(x, wq).unwrap();
    let k = g.matmul(x, wk).unwrap();
    let v = g.matmul(x, wv).unwrap();
    let s = g.block_matmul_t(q, k, block).unwrap();
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let a = g.softmax_rows(s);
    let mixed = g.block_matmul(a, v, block).unwrap();
    let res = g.add(x, mixed).unwrap();
    let pooled = g.mean_pool(res, block).unwrap();
    let loss = match case % 3 {
        0 => {
            let sq = g.mul(pooled, pooled).unwrap();
            g.sum(sq)
        }
        1 => {
            let l = labels(&mut r, seqs, d);
            g.cross_entropy(pooled, l).unwrap()
        }
        _ => {
            let t = r.normal_matrix(seqs, d, 1.0);
            g.mse(pooled, t).unwrap()
        }
    };
    (g, loss, vec![x, wq, wk, wv])
}

/// Full toy transformer with low-rank factors on every slot as trainable leaves.
pub fn model_case(case: u64) -> (GradGraph, Var, Vec<Var>) {
    let mut r = rng(case);
    let model = build_toy_model(2, 6, 3, case).unwrap();
    let cfg = *model.config();
    let mut g = GradGraph::new();
    let mut leaves = Vec::new();
    let factors: Vec<Option<FactorVars>> = (0..model.slots().len())
        .map(|i| {
            let (d_in, d_out) = model.slot_dims(i);
            let a = g.leaf(r.normal_matrix(d_in, 2, 0.5));
            let b = g.leaf(r.normal_matrix(2, d_out, 0.3));
            leaves.push(a);
            leaves.push(b);
            Some(FactorVars { a, b, scale: 1.5 })
        })
        .collect();
    let input = r.normal_matrix(2 * cfg.seq_len, cfg.width, 1.0);
    let out = model.forward_graph(&mut g, &input, model.base_weights(), &factors).unwrap();
    let loss = if case % 2 == 0 {
        let t = r.normal_matrix(2, cfg.out_dim, 1.0);
        g.mse(out, t).unwrap()
    } else {
        let l = labels(&mut r, 2, cfg.out_dim);
        g.cross_entropy(out, l).unwrap()
    };
    (g, loss, leaves)
}

/// The `case`-th of the standard 50 cases: dense chains, attention blocks and the full toy model.
pub fn case(case: u64) -> (GradGraph, Var, Vec<Var>) {
    match case % 5 {
        0 | 1 => dense_case(case),
        2 | 3 => attention_case(case),
        _ => model_case(case),
    }
}
