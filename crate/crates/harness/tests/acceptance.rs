//! Acceptance criteria, one pass/fail line each. Runs without the libtest harness
//! so the report is always printed.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

#[allow(dead_code)]
#[allow(dead_code)]
#[path = "../../core/tests/support/gradcases.rs"]
mod gradcases;

use lori_core::calibrate::masks_from_b;
use lori_core::merge::{linear_cross_terms, merge_concat, merge_dare, merge_linear};
use lori_core::ortho::{decay_sweep, gram_trials};
use lori_core::rng::StreamRng;
use lori_core::suite::{
    calibrated_overlap, forgetting_experiment, interference_experiment, mean_interference, sparsity_sweep,
    MergeSettings, SuiteConfig, Variant,
};
use lori_core::{
    calibrate, count_trainable, init_lori, init_lori_set, make_mask, mask_overlap, train_adapter, AdapterShape,
    BitMask, Granularity, LoriAdapter, LowRank, Matrix, MergeMethod, OptimizerKind, ParamCount, Projection, Purpose,
    RngStream, SlotId, SparsityConfig, TaskKind, TaskSpec, TrainConfig,
};
use lori_harness::format::{AdapterFile, FormatError};

type Verdict = (bool, String);

fn rng(criterion: u64, sub: u64) -> StreamRng {
    RngStream::new(2024, lori_core::StreamKey::new(Purpose::Scratch, criterion, sub, 0)).rng()
}

fn rel_frob(x: &Matrix, y: &Matrix) -> f64 {
    x.sub(y).unwrap().frob_norm() / x.frob_norm().max(y.frob_norm()).max(f64::MIN_POSITIVE)
}

/// Random LoRI adapter sets sharing slot shapes, with random masks and `B`.
fn random_sets(rng: &mut StreamRng, t: usize) -> Vec<Vec<LoriAdapter>> {
    let slots = 1 + rng.below(3);
    let shapes: Vec<(usize, usize, usize)> =
        (0..slots).map(|_| (3 + rng.below(8), 3 + rng.below(8), 1 + rng.below(3))).collect();
    (0..t as u64)
        .map(|task| {
            shapes
                .iter()
                .enumerate()
                .map(|(i, &(d_in, d_out, r))| {
                    let mut ad = init_lori(AdapterShape::new(d_in, d_out, r).unwrap(), 1.0 + rng.uniform(), task, i as u64)
                        .unwrap();
                    let bits: Vec<bool> = (0..r * d_out).map(|_| rng.uniform() < 0.6).collect();
                    ad.apply_mask(BitMask::from_bools(r, d_out, &bits).unwrap()).unwrap();
                    ad.set_b(rng.normal_matrix(r, d_out, 1.0)).unwrap();
                    ad
                })
                .collect()
        })
        .collect()
}

/// Scope key per granularity, written out independently of the library's partition.
fn scope_key(slot: SlotId, g: Granularity) -> String {
    match g {
        Granularity::Model => String::new(),
        Granularity::Module => format!("{:?}", slot.projection.module()),
        Granularity::Projection => slot.projection.to_string(),
        Granularity::Layer => slot.layer.to_string(),
        Granularity::Matrix => format!("{}/{}", slot.layer, slot.projection),
    }
}

fn c1_mask_budget() -> Verdict {
    let mut rng = rng(1, 0);
    let mut checked = 0usize;
    for config in 0..1000 {
        let layers = 1 + rng.below(3);
        let slots: Vec<SlotId> = (0..layers).flat_map(|l| Projection::ALL.map(|p| SlotId::new(l, p))).collect();
        let tied = config % 2 == 1;
        let b: Vec<Matrix> = slots
            .iter()
            .map(|_| {
                let (r, d_out) = (1 + rng.below(4), 1 + rng.below(12));
                let m = rng.normal_matrix(r, d_out, 1.0);
                if tied { m.map(|v| (v * 2.0).round() / 2.0) } else { m }
            })
            .collect();
        let refs: Vec<&Matrix> = b.iter().collect();
        for g in Granularity::ALL {
            // Sparsities as exact percentages so the budget oracle is integer arithmetic.
            for pct in [0usize, 50, 90, 99] {
                let set = masks_from_b(&slots, &refs, &SparsityConfig::new(pct as f64 / 100.0, g), 0).unwrap();
                let mut scopes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
                for (slot, m) in &set.masks {
                    let e = scopes.entry(scope_key(*slot, g)).or_default();
                    e.0 += m.count_ones();
                    e.1 += m.len();
                }
                for (scope, (on, n)) in scopes {
                    let budget = ((100 - pct) * n).div_ceil(100);
                    if on != budget {
                        return (false, format!("config {config}, {g}, s={pct}%, scope '{scope}': {on} != {budget}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    (true, format!("{checked} scopes over 1000 configs x 5 granularities x 4 ratios, all exact"))
}

fn c2_gradients() -> Verdict {
    let worst = (0..50u64)
        .map(|id| {
            let (mut g, loss, leaves) = gradcases::case(id);
            gradcases::fd_relative_error(&mut g, loss, &leaves)
        })
        .fold(0.0f64, f64::max);
    (worst <= 1e-5, format!("max relative error {worst:.2e} over 50 graphs (limit 1e-5)"))
}

fn c3_masked_updates() -> Verdict {
    let model = lori_core::build_toy_model(1, 16, 4, 3).unwrap();
    let ds = lori_core::gen_task(&TaskSpec::new(TaskKind::LinearRegression, 64, 0.1, 3, 0), &model).unwrap();
    let mut notes = Vec::new();
    for (name, optimizer) in [("sgd", OptimizerKind::Sgd), ("adamw", OptimizerKind::adamw())] {
        let cfg = TrainConfig { steps: 500, optimizer, seed: 3, ..TrainConfig::default() };
        let mut ads = init_lori_set(&model, 4, 8.0, 0, 3).unwrap();
        calibrate(&model, &mut ads, &ds, &SparsityConfig::new(0.9, Granularity::Model), &cfg).unwrap();
        let before = ads.clone();
        train_adapter(&model, &mut ads, &ds, &cfg).unwrap();
        let mut masked = 0;
        for (x, y) in ads.iter().zip(&before) {
            if x.a().as_slice().iter().zip(y.a().as_slice()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return (false, format!("{name}: A changed"));
            }
            for i in 0..x.b().len() {
                if !x.mask().get_index(i) {
                    masked += 1;
                    if x.b().as_slice()[i].to_bits() != y.b().as_slice()[i].to_bits() {
                        return (false, format!("{name}: masked B entry {i} changed"));
                    }
                }
            }
        }
        let moved = ads.iter().zip(&before).any(|(x, y)| x.b() != y.b());
        if !moved {
            return (false, format!("{name}: no retained entry moved"));
        }
        notes.push(format!("{name}: {masked} masked entries"));
    }
    (true, format!("500 steps, A and masked B bitwise unchanged ({})", notes.join(", ")))
}

fn c4_concat_identity() -> Verdict {
    let mut rng = rng(4, 0);
    let mut worst = 0.0f64;
    for t in [2, 3, 4] {
        for _ in 0..20 {
            let sets = random_sets(&mut rng, t);
            let refs: Vec<&[LoriAdapter]> = sets.iter().map(|s| s.as_slice()).collect();
            let w: Vec<f64> = (0..t).map(|_| rng.symmetric(1.5)).collect();
            let base: Vec<Matrix> =
                sets[0].iter().map(|a| rng.normal_matrix(a.shape().d_in, a.shape().d_out, 1.0)).collect();
            let concat = merge_concat(&base, &refs, &w).unwrap();
            for (slot, w0) in base.iter().enumerate() {
                // Independent delta-sum: W0 + Σ α_t Δ_t with each Δ_t materialized separately.
                let mut sum = w0.clone();
                for (set, &a) in sets.iter().zip(&w) {
                    sum.axpy(a, &set[slot].delta()).unwrap();
                }
                worst = worst.max(rel_frob(&concat.weights[slot], &sum));
            }
        }
    }
    (worst <= 1e-12, format!("max relative discrepancy {worst:.2e} for T in {{2,3,4}} (limit 1e-12)"))
}

fn c5_linear_cross_terms() -> Verdict {
    let mut rng = rng(5, 0);
    let (mut unit, mut general) = (0.0f64, 0.0f64);
    for t in [2, 3, 4] {
        for case in 0..20 {
            let sets = random_sets(&mut rng, t);
            let refs: Vec<&[LoriAdapter]> = sets.iter().map(|s| s.as_slice()).collect();
            let w: Vec<f64> = if case % 2 == 0 { vec![1.0; t] } else { (0..t).map(|_| rng.symmetric(1.5)).collect() };
            let base: Vec<Matrix> = sets[0].iter().map(|a| Matrix::zeros(a.shape().d_in, a.shape().d_out)).collect();
            let lin = merge_linear(&base, &refs, &w).unwrap();
            let cat = merge_concat(&base, &refs, &w).unwrap();
            let lib_cross = linear_cross_terms(&refs, &w).unwrap();
            for slot in 0..base.len() {
                // Σ_{s≠t} α_s α_t A_s B̃_t + Σ_t (α_t² − α_t) Δ_t, from each adapter's own factors.
                let (d_in, d_out) = (sets[0][slot].shape().d_in, sets[0][slot].shape().d_out);
                let mut expect = Matrix::zeros(d_in, d_out);
                for (s, x) in sets.iter().enumerate() {
                    for (u, y) in sets.iter().enumerate() {
                        let (a, _) = x[slot].factors();
                        let (_, b) = y[slot].factors();
                        let coef = if s == u { w[s] * w[s] - w[s] } else { w[s] * w[u] };
                        expect.axpy(coef, &a.matmul(&b).unwrap()).unwrap();
                    }
                }
                let diff = lin.weights[slot].sub(&cat.weights[slot]).unwrap();
                let err = rel_frob(&diff, &expect);
                if case % 2 == 0 {
                    unit = unit.max(err).max(rel_frob(&diff, &lib_cross[slot]));
                } else {
                    general = general.max(err);
                }
            }
        }
    }
    let ok = unit <= 1e-12 && general <= 1e-12;
    (ok, format!("unit weights: diff vs cross terms {unit:.2e}; general weights incl. (a^2-a) diagonal {general:.2e} (limit 1e-12)"))
}

fn c6_hoeffding() -> Verdict {
    let report = gram_trials(16, 1024, 0.05, 200, 6).unwrap();
    let max = report.norms.iter().copied().fold(0.0, f64::max);
    (
        report.satisfaction >= 0.95,
        format!(
            "{:.1}% of 200 trials within bound {:.3} (max norm {:.3}, limit 95%)",
            100.0 * report.satisfaction,
            report.bound,
            max
        ),
    )
}

fn c7_decay() -> Verdict {
    let curve = decay_sweep(16, &[1024, 4096], 64, 7).unwrap();
    let ratio = curve[1].mean / curve[0].mean;
    (
        ratio <= 0.65,
        format!("mean |inner| {:.4e} -> {:.4e}, ratio {ratio:.3} (limit 0.65, theory 0.5)", curve[0].mean, curve[1].mean),
    )
}

fn c8_dare() -> Verdict {
    let mut rng = rng(8, 0);
    let mut ad = init_lori(AdapterShape::new(8, 6, 3).unwrap(), 6.0, 0, 8).unwrap();
    ad.set_b(rng.normal_matrix(3, 6, 1.0)).unwrap();
    let target = ad.delta();
    let base = vec![Matrix::zeros(8, 6)];
    let n = 2000;
    let mut sum = Matrix::zeros(8, 6);
    let mut sq = Matrix::zeros(8, 6);
    for seed in 0..n as u64 {
        let m = merge_dare(&base, &[std::slice::from_ref(&ad)], &[1.0], 0.5, seed).unwrap();
        sum.add_assign(&m.weights[0]).unwrap();
        sq.add_assign(&m.weights[0].hadamard(&m.weights[0]).unwrap()).unwrap();
    }
    let mut worst = 0.0f64;
    for i in 0..target.len() {
        let mean = sum.as_slice()[i] / n as f64;
        let var = (sq.as_slice()[i] / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
        let se = (var.max(0.0) / n as f64).sqrt();
        let z = if se > 0.0 { (mean - target.as_slice()[i]).abs() / se } else if mean == target.as_slice()[i] { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    (worst <= 4.0, format!("max |mean - delta| = {worst:.2} standard errors over {} entries, 2000 draws (limit 4)", target.len()))
}

fn reference_seeds() -> std::ops::Range<u64> {
    0..5
}

fn c9_interference() -> Verdict {
    let settings = MergeSettings { methods: vec![MergeMethod::Concat], weights: Some(vec![1.0 / 3.0; 3]), density: 0.5 };
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in reference_seeds() {
        let rows = interference_experiment(&SuiteConfig::reference(seed), &[Variant::Lora, Variant::LoriDense], &settings).unwrap();
        let lora = mean_interference(&rows, Variant::Lora, MergeMethod::Concat).unwrap();
        let lori = mean_interference(&rows, Variant::LoriDense, MergeMethod::Concat).unwrap();
        wins += (lori < lora) as usize;
        notes.push(format!("{lori:.3}/{lora:.3}"));
    }
    (wins >= 4, format!("LoRI-D < LoRA in {wins}/5 seeds (mean I_t lori-d/lora: {})", notes.join(", ")))
}

fn c10_forgetting() -> Verdict {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in reference_seeds() {
        let out = forgetting_experiment(&SuiteConfig::reference(seed), 0, &[Variant::Lora, Variant::LoriSparse], false).unwrap();
        let (lora, lori) = (out[0].mean_delta_loss(), out[1].mean_delta_loss());
        wins += (lori < lora) as usize;
        notes.push(format!("{lori:.3}/{lora:.3}"));
    }
    (wins >= 4, format!("LoRI-S < LoRA in {wins}/5 seeds (phase-1 loss increase lori-s/lora: {})", notes.join(", ")))
}

fn c11_overlap() -> Verdict {
    let mut rng = rng(11, 0);
    let (n, draws) = (1000usize, 1000usize);
    let mut total = 0.0;
    for _ in 0..draws {
        let a: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.1).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.1).collect();
        total += mask_overlap(&BitMask::from_bools(1, n, &a).unwrap(), &BitMask::from_bools(1, n, &b).unwrap()).unwrap();
    }
    let mean = total / draws as f64;
    // Shared bits per draw ~ Binomial(n, 0.01); the mean of `draws` draws has this standard deviation.
    let sigma = (0.01 * 0.99 / (n * draws) as f64).sqrt();
    let random_ok = (mean - 0.01).abs() <= 3.0 * sigma;
    let calibrated = calibrated_overlap(&SuiteConfig::reference(0), 0, 1).unwrap();
    let calibrated_ok = (0.001..=0.05).contains(&calibrated);
    (
        random_ok && calibrated_ok,
        format!(
            "random masks: mean overlap {mean:.5} (0.01 +/- {:.5}); calibrated masks of tasks 0 and 1: {:.3}% (range 0.1%-5%)",
            3.0 * sigma,
            100.0 * calibrated
        ),
    )
}

fn c12_sparsity() -> Verdict {
    let mut dense = [0.0f64; 3];
    let mut sparse = [0.0f64; 3];
    for seed in reference_seeds() {
        for r in sparsity_sweep(&SuiteConfig::reference(seed), &[0.0, 0.9]).unwrap() {
            let slot = if r.sparsity == 0.0 { &mut dense } else { &mut sparse };
            slot[r.task_id as usize] += r.metric / 5.0;
        }
    }
    let mut within = 0;
    let mut notes = Vec::new();
    for t in 0..3 {
        let rel = (sparse[t] - dense[t]).abs() / dense[t].abs();
        within += (rel <= 0.15) as usize;
        notes.push(format!("task {t}: {:.3} vs {:.3} ({:+.1}%)", sparse[t], dense[t], 100.0 * (sparse[t] / dense[t] - 1.0)));
    }
    (within >= 2, format!("{within}/3 tasks within 15% ({})", notes.join("; ")))
}

fn c13_param_counts() -> Verdict {
    let mut ads: Vec<LoriAdapter> = (0..6).map(|i| init_lori(AdapterShape::new(64, 64, 8).unwrap(), 16.0, 0, i).unwrap()).collect();
    let lora = count_trainable(&ads, ParamCount::Lora).unwrap();
    let dense = count_trainable(&ads, ParamCount::LoriDense).unwrap();
    let mut rng = rng(13, 0);
    let b: Vec<Matrix> = ads.iter().map(|_| rng.normal_matrix(8, 64, 1.0)).collect();
    let (masks, _) = make_mask(&b.iter().collect::<Vec<_>>(), 0.9).unwrap();
    for (ad, m) in ads.iter_mut().zip(masks) {
        ad.apply_mask(m).unwrap();
    }
    let sparse = count_trainable(&ads, ParamCount::LoriSparse).unwrap();
    let ratio = sparse as f64 / lora as f64;
    let reference = 4.4 / 84.0;
    let ok = 2 * dense == lora && (ratio - reference).abs() <= 0.01;
    (
        ok,
        format!(
            "LoRA {lora}, LoRI-D {dense} (exactly half: {}), LoRI-S {sparse} = {:.2}% of LoRA vs 4.4M/84M = {:.2}%",
            2 * dense == lora,
            100.0 * ratio,
            100.0 * reference
        ),
    )
}

fn c14_serialization() -> Verdict {
    let mut rng = rng(14, 0);
    let mut rejected = 0;
    for i in 0..100u64 {
        let (d_in, d_out) = (1 + rng.below(20), 1 + rng.below(20));
        let r = 1 + rng.below(d_in.min(d_out));
        let slots = 1 + rng.below(3);
        let ads: Vec<LoriAdapter> = (0..slots as u64)
            .map(|s| {
                let mut ad = init_lori(AdapterShape::new(d_in, d_out, r).unwrap(), 2.0 * r as f64, i, s).unwrap();
                let bits: Vec<bool> = (0..r * d_out).map(|_| rng.uniform() < rng.uniform()).collect();
                ad.apply_mask(BitMask::from_bools(r, d_out, &bits).unwrap()).unwrap();
                ad.set_b(rng.normal_matrix(r, d_out, 3.0)).unwrap();
                ad
            })
            .collect();
        let names = (0..slots).map(|s| format!("slot{s}")).collect();
        let file = AdapterFile::new(ads.clone(), names, i, None).unwrap();
        let bytes = file.to_bytes().unwrap();
        let back = AdapterFile::from_bytes(&bytes).unwrap();
        for (x, y) in ads.iter().zip(&back.adapters) {
            if x.mask() != y.mask() {
                return (false, format!("adapter {i}: mask differs"));
            }
            let f32_exact = |p: &Matrix, q: &Matrix| p.as_slice().iter().zip(q.as_slice()).all(|(u, v)| (*u as f32) as f64 == *v);
            if !f32_exact(x.a(), y.a()) || !f32_exact(x.b(), y.b()) {
                return (false, format!("adapter {i}: weights not float32-exact"));
            }
        }
        let payload_start = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut corrupt = bytes.clone();
        let pos = payload_start + rng.below(bytes.len() - payload_start);
        corrupt[pos] ^= 1 << rng.below(8);
        let truncated = &bytes[..bytes.len() - 1 - rng.below(bytes.len() - payload_start)];
        for bad in [corrupt.as_slice(), truncated] {
            match AdapterFile::from_bytes(bad) {
                Err(FormatError::Checksum(_)) => rejected += 1,
                other => return (false, format!("adapter {i}: corrupted file gave {other:?}")),
            }
        }
    }
    (rejected == 200, format!("100 adapters round-trip exactly; {rejected}/200 corrupted or truncated files rejected by checksum"))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Verdict); 14] = [
        (1, "mask budget exactness", c1_mask_budget),
        (2, "gradient correctness", c2_gradients),
        (3, "masked-update exactness", c3_masked_updates),
        (4, "concat-merge identity", c4_concat_identity),
        (5, "linear-merge cross terms", c5_linear_cross_terms),
        (6, "Hoeffding bound", c6_hoeffding),
        (7, "orthogonality decay", c7_decay),
        (8, "DARE unbiasedness", c8_dare),
        (9, "interference direction", c9_interference),
        (10, "forgetting direction", c10_forgetting),
        (11, "mask overlap", c11_overlap),
        (12, "sparsity robustness", c12_sparsity),
        (13, "parameter accounting", c13_param_counts),
        (14, "serialization", c14_serialization),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = std::panic::catch_unwind(run).unwrap_or_else(|_| (false, "panicked".into()));
        failed += (!pass) as usize;
        println!(
            "{} criterion {id:>2} {name} [{:.1}s]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
