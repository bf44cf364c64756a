//! Property-based invariants across the numeric core, masks and merging.

use lori_core::calibrate::make_mask;
use lori_core::merge::{
    cross_terms_slot, delta_sum_slot, linear_slot, merge, merge_concat, merge_delta_sum, merge_linear,
    linear_cross_terms, Factors, MergeMethod, MergeSpec,
};
use lori_core::ortho::normalized_pair_inner;
use lori_core::select::{kth_largest_abs, retained_count, top_k_membership};
use lori_core::{
    forward, mask_overlap, merge_into_base, BitMask, LoriAdapter, LowRank, Matrix, Purpose, RngStream, StreamKey,
};
use proptest::prelude::*;

fn stream(seed: u64, task: u64, slot: u64) -> RngStream {
    RngStream::new(seed, StreamKey::new(Purpose::Scratch, task, 0, slot))
}

fn random_matrix(seed: u64, slot: u64, rows: usize, cols: usize) -> Matrix {
    stream(seed, 1000, slot).rng().normal_matrix(rows, cols, 1.0)
}

fn random_mask(seed: u64, slot: u64, rows: usize, cols: usize, density: f64) -> BitMask {
    let mut rng = stream(seed, 2000, slot).rng();
    let bits: Vec<bool> = (0..rows * cols).map(|_| rng.uniform() < density).collect();
    BitMask::from_bools(rows, cols, &bits).unwrap()
}

/// Adapter with random `A`, random `B` and a random mask of the given density.
fn random_adapter(seed: u64, task: u64, d_in: usize, d_out: usize, r: usize, density: f64) -> LoriAdapter {
    let mut rng = stream(seed, task, 0).rng();
    let a = rng.normal_matrix(d_in, r, 0.5);
    let b = rng.normal_matrix(r, d_out, 0.5);
    let mask = random_mask(seed, task, r, d_out, density);
    LoriAdapter::from_parts(a, b, mask, 1.0 + task as f64, task, stream(seed, task, 1), true).unwrap()
}

/// One random adapter set per task over three slots of varied shapes.
fn random_sets(seed: u64, tasks: usize, r: usize) -> (Vec<Matrix>, Vec<Vec<LoriAdapter>>) {
    let dims = [(5, 7), (6, 6), (8, 3)];
    let base = dims.iter().enumerate().map(|(i, &(a, b))| random_matrix(seed, i as u64, a, b)).collect();
    let sets = (0..tasks as u64)
        .map(|t| dims.iter().map(|&(a, b)| random_adapter(seed.wrapping_add(t * 7919), t, a, b, r, 0.6)).collect())
        .collect();
    (base, sets)
}

fn rel_diff(x: &Matrix, y: &Matrix, scale: f64) -> f64 {
    x.sub(y).unwrap().frob_norm() / scale.max(f64::MIN_POSITIVE)
}

fn refs(sets: &[Vec<LoriAdapter>]) -> Vec<&[LoriAdapter]> {
    sets.iter().map(|s| s.as_slice()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_transposes_agree(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, p in 1usize..6) {
        let a = random_matrix(seed, 0, n, m);
        let b = random_matrix(seed, 1, m, p);
        let ab = a.matmul(&b).unwrap();
        let bt_at = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(rel_diff(&ab.transpose(), &bt_at, ab.frob_norm()) < 1e-14);
        prop_assert!(ab.is_finite());
        prop_assert_eq!(ab.len(), n * p);
    }

    #[test]
    fn frob_inner_is_symmetric_and_norm_consistent(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let a = random_matrix(seed, 0, n, m);
        let b = random_matrix(seed, 1, n, m);
        prop_assert_eq!(a.frob_inner(&b).unwrap(), b.frob_inner(&a).unwrap());
        let n2 = a.frob_inner(&a).unwrap();
        prop_assert!((n2.sqrt() - a.frob_norm()).abs() <= 1e-12 * (1.0 + n2.sqrt()));
    }

    #[test]
    fn kth_largest_matches_sort_oracle(values in prop::collection::vec(-10.0f64..10.0, 1..60), pick in any::<prop::sample::Index>()) {
        let k = pick.index(values.len()) + 1;
        let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert_eq!(kth_largest_abs(&values, k).unwrap(), mags[k - 1]);
        let keep = top_k_membership(&values, k);
        prop_assert_eq!(keep.iter().filter(|&&b| b).count(), k);
        let tau = mags[k - 1];
        for (v, kept) in values.iter().zip(&keep) {
            if *kept { prop_assert!(v.abs() >= tau); } else { prop_assert!(v.abs() <= tau); }
        }
    }

    #[test]
    fn retained_count_is_exact_ceiling(n in 1usize..5000, s_idx in 0usize..4) {
        let s = [0.0, 0.5, 0.9, 0.99][s_idx];
        // Integer oracle: ceil((100 - 100 s) · n / 100) with s expressed in hundredths.
        let keep_pct = [100usize, 50, 10, 1][s_idx];
        let expected = (keep_pct * n).div_ceil(100);
        prop_assert_eq!(retained_count(s, n), expected);
    }

    #[test]
    fn make_mask_budget_and_threshold(seed in any::<u64>(), sizes in prop::collection::vec((1usize..6, 1usize..9), 1..5), s_idx in 0usize..4) {
        let s = [0.0, 0.5, 0.9, 0.99][s_idx];
        let mats: Vec<Matrix> = sizes.iter().enumerate().map(|(i, &(r, c))| random_matrix(seed, i as u64, r, c)).collect();
        let refs: Vec<&Matrix> = mats.iter().collect();
        let (masks, tau) = make_mask(&refs, s).unwrap();
        let total: usize = mats.iter().map(|m| m.len()).sum();
        let set: usize = masks.iter().map(|m| m.count_ones()).sum();
        prop_assert_eq!(set, retained_count(s, total));
        let pooled: Vec<f64> = mats.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
        prop_assert_eq!(tau, kth_largest_abs(&pooled, set).unwrap());
    }

    #[test]
    fn mask_bytes_round_trip(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..20, density in 0.0f64..1.0) {
        let m = random_mask(seed, 0, rows, cols, density);
        let back = BitMask::from_bytes(rows, cols, &m.to_bytes()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn overlap_symmetric_and_bounded(seed in any::<u64>(), rows in 1usize..9, cols in 1usize..20, da in 0.0f64..1.0, db in 0.0f64..1.0) {
        let a = random_mask(seed, 0, rows, cols, da);
        let b = random_mask(seed, 1, rows, cols, db);
        let ab = mask_overlap(&a, &b).unwrap();
        prop_assert_eq!(ab, mask_overlap(&b, &a).unwrap());
        let (fa, fb) = (a.density(), b.density());
        prop_assert!(ab <= fa.min(fb) + 1e-15);
        prop_assert!(ab >= (fa + fb - 1.0).max(0.0) - 1e-15);
    }

    #[test]
    fn forward_equals_merged_weights(seed in any::<u64>(), n in 1usize..5, d_in in 2usize..7, d_out in 2usize..7, r in 1usize..3) {
        let ad = random_adapter(seed, 3, d_in, d_out, r.min(d_in).min(d_out), 0.5);
        let w0 = random_matrix(seed, 4, d_in, d_out);
        let x = random_matrix(seed, 5, n, d_in);
        let direct = forward(&x, &w0, &ad).unwrap();
        let merged = x.matmul(&merge_into_base(&w0, &ad).unwrap()).unwrap();
        prop_assert!(rel_diff(&direct, &merged, merged.frob_norm()) <= 1e-12);
    }

    #[test]
    fn concat_equals_delta_sum(seed in any::<u64>(), tasks in 1usize..9, r in 1usize..4) {
        let (base, sets) = random_sets(seed, tasks, r);
        let w: Vec<f64> = (0..tasks).map(|t| 0.2 + 0.1 * t as f64).collect();
        let a = merge_concat(&base, &refs(&sets), &w).unwrap();
        let b = merge_delta_sum(&base, &refs(&sets), &w).unwrap();
        for ((x, y), w0) in a.weights.iter().zip(&b.weights).zip(&base) {
            prop_assert!(rel_diff(x, y, y.sub(w0).unwrap().frob_norm()) <= 1e-12);
        }
    }

    #[test]
    fn linear_minus_concat_is_cross_terms(seed in any::<u64>(), tasks in 1usize..6) {
        let (base, sets) = random_sets(seed, tasks, 2);
        let w: Vec<f64> = (0..tasks).map(|t| 0.5 - 0.07 * t as f64).collect();
        let lin = merge_linear(&base, &refs(&sets), &w).unwrap();
        let cat = merge_concat(&base, &refs(&sets), &w).unwrap();
        let cross = linear_cross_terms(&refs(&sets), &w).unwrap();
        for (slot, ((l, c), x)) in lin.weights.iter().zip(&cat.weights).zip(&cross).enumerate() {
            // The double sum weights each diagonal term by α², concatenation by α.
            let mut expected = x.clone();
            for (set, &a) in sets.iter().zip(&w) {
                expected.axpy(a * a - a, &set[slot].delta()).unwrap();
            }
            let diff = l.sub(c).unwrap();
            prop_assert!(rel_diff(&diff, &expected, l.frob_norm()) <= 1e-12);
        }
        let ones = vec![1.0; tasks];
        let lin = merge_linear(&base, &refs(&sets), &ones).unwrap();
        let cat = merge_concat(&base, &refs(&sets), &ones).unwrap();
        let cross = linear_cross_terms(&refs(&sets), &ones).unwrap();
        for ((l, c), x) in lin.weights.iter().zip(&cat.weights).zip(&cross) {
            prop_assert!(rel_diff(&l.sub(c).unwrap(), x, l.frob_norm()) <= 1e-12);
        }
    }

    #[test]
    fn concat_is_linear_in_weights(seed in any::<u64>(), tasks in 1usize..5) {
        let (base, sets) = random_sets(seed, tasks, 2);
        let w: Vec<f64> = (0..tasks).map(|t| 0.3 + 0.05 * t as f64).collect();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let one = merge_concat(&base, &refs(&sets), &w).unwrap();
        let two = merge_concat(&base, &refs(&sets), &w2).unwrap();
        for ((a, b), w0) in one.weights.iter().zip(&two.weights).zip(&base) {
            let doubled = w0.add(&a.sub(w0).unwrap().scale(2.0)).unwrap();
            prop_assert!(rel_diff(b, &doubled, b.frob_norm()) <= 1e-12);
        }
    }

    #[test]
    fn merges_are_permutation_invariant(seed in any::<u64>(), tasks in 2usize..5, method_idx in 0usize..5) {
        let method = MergeMethod::ALL[method_idx];
        let (base, sets) = random_sets(seed, tasks, 2);
        let w: Vec<f64> = (0..tasks).map(|t| 0.25 + 0.1 * t as f64).collect();
        let spec = MergeSpec { method, weights: w.clone(), density: 0.6, seed };
        let fwd = merge(&base, &refs(&sets), &spec).unwrap();
        let mut rev_sets = sets.clone();
        rev_sets.reverse();
        let rev_w: Vec<f64> = w.iter().rev().copied().collect();
        let rev = merge(&base, &refs(&rev_sets), &MergeSpec { weights: rev_w, ..spec }).unwrap();
        for (a, b) in fwd.weights.iter().zip(&rev.weights) {
            prop_assert!(rel_diff(a, b, a.frob_norm()) <= 1e-12);
        }
    }

    #[test]
    fn ties_outputs_follow_elected_sign(seed in any::<u64>(), tasks in 2usize..6) {
        let (base, sets) = random_sets(seed, tasks, 2);
        let w = vec![1.0; tasks];
        let merged = merge(&base, &refs(&sets), &MergeSpec { method: MergeMethod::Ties, weights: w.clone(), density: 0.7, seed }).unwrap();
        for (slot, (out, w0)) in merged.weights.iter().zip(&base).enumerate() {
            let deltas: Vec<Matrix> = sets.iter().map(|s| {
                let (a, b) = s[slot].factors();
                lori_core::merge::magnitude_prune(&a, 0.7).unwrap().matmul(&lori_core::merge::magnitude_prune(&b, 0.7).unwrap()).unwrap()
            }).collect();
            let tau = out.sub(w0).unwrap();
            for i in 0..tau.len() {
                let v = tau.as_slice()[i];
                let sum: f64 = deltas.iter().map(|d| d.as_slice()[i]).sum();
                if v != 0.0 {
                    prop_assert_eq!(v > 0.0, sum >= 0.0, "coordinate {} has value {} against sum {}", i, v, sum);
                }
            }
        }
    }

    #[test]
    fn full_density_pruning_is_concat(seed in any::<u64>(), tasks in 1usize..4, method_idx in 0usize..3) {
        let method = [MergeMethod::Magnitude, MergeMethod::Dare, MergeMethod::Concat][method_idx];
        let (base, sets) = random_sets(seed, tasks, 2);
        let w = vec![0.4; tasks];
        let pruned = merge(&base, &refs(&sets), &MergeSpec { method, weights: w.clone(), density: 1.0, seed }).unwrap();
        let cat = merge_concat(&base, &refs(&sets), &w).unwrap();
        prop_assert_eq!(pruned.weights, cat.weights);
    }

    #[test]
    fn normalized_inner_is_scale_invariant(seed in any::<u64>(), c1 in 0.01f64..100.0, c2 in 0.01f64..100.0) {
        let a_s = random_matrix(seed, 0, 40, 4);
        let a_t = random_matrix(seed, 1, 40, 4);
        let b_s = random_matrix(seed, 2, 4, 5);
        let b_t = random_matrix(seed, 3, 4, 5);
        let base = normalized_pair_inner(&a_s, &b_s, &a_t, &b_t).unwrap();
        let scaled = normalized_pair_inner(&a_s, &b_s.scale(c1), &a_t, &b_t.scale(c2)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * (1.0 + base));
    }
}

#[test]
fn slot_level_identities_on_hand_factors() {
    let w0 = Matrix::zeros(2, 2);
    let f1: Factors = (Matrix::from_rows(&[[1.0], [0.0]]), Matrix::from_rows(&[[0.0, 2.0]]));
    let f2: Factors = (Matrix::from_rows(&[[0.0], [1.0]]), Matrix::from_rows(&[[3.0, 0.0]]));
    let w = [0.5, 0.5];
    let cat = delta_sum_slot(&w0, &[f1.clone(), f2.clone()], &w).unwrap();
    assert_eq!(cat, Matrix::from_rows(&[[0.0, 1.0], [1.5, 0.0]]));
    // Cross terms: α₁α₂(A₁B₂ + A₂B₁) = 0.25·([[3,0],[0,0]] + [[0,0],[0,2]]).
    let cross = cross_terms_slot(&[f1.clone(), f2.clone()], &w).unwrap();
    assert_eq!(cross, Matrix::from_rows(&[[0.75, 0.0], [0.0, 0.5]]));
    // With unit weights the difference is exactly the cross terms.
    let unit = [1.0, 1.0];
    let lin = linear_slot(&w0, &[f1.clone(), f2.clone()], &unit).unwrap();
    let cat_unit = delta_sum_slot(&w0, &[f1.clone(), f2.clone()], &unit).unwrap();
    assert_eq!(lin.sub(&cat_unit).unwrap(), cross_terms_slot(&[f1.clone(), f2.clone()], &unit).unwrap());
    // At α = 0.5 the diagonal carries 0.25 instead of 0.5.
    let lin = linear_slot(&w0, &[f1.clone(), f2], &w).unwrap();
    assert_eq!(lin, Matrix::from_rows(&[[0.75, 0.5], [0.75, 0.5]]));
    // One adapter at α = 0.5 under linear merging carries α² = 0.25.
    let single = linear_slot(&w0, &[f1], &[0.5]).unwrap();
    assert_eq!(single, Matrix::from_rows(&[[0.0, 0.5], [0.0, 0.0]]));
}

#[test]
fn dare_survivors_double_at_half_density() {
    let (base, sets) = random_sets(5, 1, 2);
    let spec = MergeSpec { method: MergeMethod::Dare, weights: vec![1.0], density: 0.5, seed: 3 };
    let once = merge(&base, &refs(&sets), &spec).unwrap();
    let again = merge(&base, &refs(&sets), &spec).unwrap();
    assert_eq!(once, again);
    let other = merge(&base, &refs(&sets), &MergeSpec { seed: 4, ..spec }).unwrap();
    assert_ne!(once.weights, other.weights);
    let _ = sets[0][0].delta();
}
