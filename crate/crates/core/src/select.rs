//! Magnitude order statistics with deterministic tie-breaking.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Indices ordered by `|value|` descending, then index ascending.
pub fn magnitude_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx
}

/// The `k`-th largest absolute value (1-based).
pub fn kth_largest_abs(values: &[f64], k: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("kth_largest_abs on empty input"));
    }
    if k == 0 || k > values.len() {
        return Err(Error::arg(alloc::format!(
            "k = {k} outside 1..={}",
            values.len()
        )));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(|a, b| b.total_cmp(a));
    Ok(abs[k - 1])
}

/// Number of entries retained out of `n` at sparsity `s`: `ceil((1 - s) * n)`.
///
/// Products that land within rounding distance of an integer are snapped to it, so
/// e.g. `s = 0.99, n = 100` keeps exactly one entry rather than two.
pub fn retained_count(s: f64, n: usize) -> usize {
    let x = (1.0 - s) * n as f64;
    let nearest = libm::round(x);
    let k = if (x - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        libm::ceil(x)
    };
    (k as usize).min(n)
}

/// Positions of the `k` largest-magnitude entries, as a membership vector.
pub fn top_k_membership(values: &[f64], k: usize) -> Vec<bool> {
    let mut keep = alloc::vec![false; values.len()];
    for &i in magnitude_order(values).iter().take(k) {
        keep[i] = true;
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    const VALUES: [f64; 10] = [0.1, -0.4, 0.25, 0.9, -0.05, 0.3, 0.7, -0.2, 0.6, 0.15];

    #[test]
    fn kth_largest_examples() {
        assert_eq!(kth_largest_abs(&VALUES, 5).unwrap(), 0.3);
        assert_eq!(kth_largest_abs(&VALUES, 10).unwrap(), 0.05);
        assert_eq!(kth_largest_abs(&VALUES, 1).unwrap(), 0.9);
    }

    #[test]
    fn kth_largest_errors() {
        assert!(kth_largest_abs(&[], 1).is_err());
        assert!(kth_largest_abs(&VALUES, 0).is_err());
        assert!(kth_largest_abs(&VALUES, 11).is_err());
    }

    #[test]
    fn retained_count_snaps_to_integers() {
        assert_eq!(retained_count(0.99, 100), 1);
        assert_eq!(retained_count(0.9, 10), 1);
        assert_eq!(retained_count(0.9, 512), 52);
        assert_eq!(retained_count(0.5, 10), 5);
        assert_eq!(retained_count(0.0, 7), 7);
        assert_eq!(retained_count(0.99, 1), 1);
    }

    #[test]
    fn ties_break_by_index() {
        let keep = top_k_membership(&[0.0; 6], 2);
        assert_eq!(keep, [true, true, false, false, false, false]);
        let keep = top_k_membership(&[0.5, -1.0, 1.0, 0.5], 2);
        assert_eq!(keep, [false, true, true, false]);
    }
}
