//! Monte-Carlo checks that independent random projections make adapters nearly orthogonal.

use alloc::vec::Vec;

use crate::adapter::LowRank;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::merge::normalized_delta_inner;
use crate::rng::{kaiming_uniform, Purpose, RngStream, StreamKey};

/// `r · sqrt(18 · ln(2r² / δ) / d_in)`: with probability at least `1 - δ`,
/// `‖A_sᵀ A_t‖_F` stays below this for independent Kaiming-uniform projections.
pub fn hoeffding_bound(r: usize, d_in: usize, delta: f64) -> Result<f64> {
    if r == 0 || d_in == 0 {
        return Err(Error::arg("r and d_in must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::arg(alloc::format!("failure probability must be in (0, 1), got {delta}")));
    }
    let r = r as f64;
    Ok(r * libm::sqrt(18.0 * libm::log(2.0 * r * r / delta) / d_in as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramReport {
    pub r: usize,
    pub d_in: usize,
    pub delta: f64,
    pub trials: usize,
    /// `‖A_sᵀ A_t‖_F` per trial.
    pub norms: Vec<f64>,
    pub bound: f64,
    /// Fraction of trials at or below the bound.
    pub satisfaction: f64,
    /// Mean of `|<A_s, A_t>_F| / (‖A_s‖_F ‖A_t‖_F)`.
    pub mean_normalized_inner: f64,
}

fn ortho_stream(seed: u64, d_in: usize, trial: usize, side: u64) -> RngStream {
    RngStream::new(seed, StreamKey::new(Purpose::Ortho, trial as u64, d_in as u64, side))
}

/// `‖A_sᵀ A_t‖_F`.
pub fn gram_norm(a_s: &Matrix, a_t: &Matrix) -> Result<f64> {
    Ok(a_s.t_matmul(a_t)?.frob_norm())
}

/// Samples `trials` independent projection pairs and compares `‖A_sᵀ A_t‖_F` with the bound.
pub fn gram_trials(r: usize, d_in: usize, delta: f64, trials: usize, seed: u64) -> Result<GramReport> {
    let bound = hoeffding_bound(r, d_in, delta)?;
    if trials == 0 {
        return Err(Error::arg("at least one trial required"));
    }
    let mut norms = Vec::with_capacity(trials);
    let mut normalized = 0.0;
    for trial in 0..trials {
        let a_s = kaiming_uniform(d_in, r, &ortho_stream(seed, d_in, trial, 0))?;
        let a_t = kaiming_uniform(d_in, r, &ortho_stream(seed, d_in, trial, 1))?;
        norms.push(gram_norm(&a_s, &a_t)?);
        normalized += a_s.frob_inner(&a_t)?.abs() / (a_s.frob_norm() * a_t.frob_norm());
    }
    let satisfied = norms.iter().filter(|&&n| n <= bound).count();
    Ok(GramReport {
        r,
        d_in,
        delta,
        trials,
        bound,
        satisfaction: satisfied as f64 / trials as f64,
        mean_normalized_inner: normalized / trials as f64,
        norms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub r: usize,
    /// Columns of the random `B̃` factors.
    pub d_out: usize,
    /// Failure probability for the reported bound.
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
}

/// One row of a decay sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayPoint {
    pub d_in: usize,
    /// Mean of `|<Δ_s, Δ_t>_F| / (‖Δ_s‖_F ‖Δ_t‖_F)`.
    pub mean: f64,
    pub std: f64,
    pub bound: f64,
    /// Fraction of trials with `‖A_sᵀ A_t‖_F` within the bound.
    pub satisfaction: f64,
}

/// Unit-Frobenius-norm Gaussian matrix.
fn unit_gaussian(rows: usize, cols: usize, stream: &RngStream) -> Matrix {
    let m = stream.rng().normal_matrix(rows, cols, 1.0);
    let n = m.frob_norm();
    m.scale(1.0 / n)
}

/// `|<A_s B_s, A_t B_t>_F| / (‖A_s B_s‖_F ‖A_t B_t‖_F)`.
pub fn normalized_pair_inner(a_s: &Matrix, b_s: &Matrix, a_t: &Matrix, b_t: &Matrix) -> Result<f64> {
    let ds = a_s.matmul(b_s)?;
    let dt = a_t.matmul(b_t)?;
    Ok(ds.frob_inner(&dt)?.abs() / (ds.frob_norm() * dt.frob_norm()))
}

/// Mean normalized inner product of random-projection deltas as `d_in` grows.
pub fn decay_sweep(r: usize, d_in_list: &[usize], trials: usize, seed: u64) -> Result<Vec<DecayPoint>> {
    decay_sweep_with(&SweepOptions { r, d_out: r, delta: 0.05, trials, seed }, d_in_list)
}

pub fn decay_sweep_with(opts: &SweepOptions, d_in_list: &[usize]) -> Result<Vec<DecayPoint>> {
    if opts.trials == 0 || opts.r == 0 || opts.d_out == 0 {
        return Err(Error::arg("decay sweep needs positive r, d_out and trials"));
    }
    if d_in_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("d_in list must be strictly ascending"));
    }
    if let Some(&bad) = d_in_list.iter().find(|&&d| d <= opts.r) {
        return Err(Error::arg(alloc::format!("d_in = {bad} must exceed r = {}", opts.r)));
    }
    let mut out = Vec::with_capacity(d_in_list.len());
    for &d_in in d_in_list {
        let bound = hoeffding_bound(opts.r, d_in, opts.delta)?;
        let mut values = Vec::with_capacity(opts.trials);
        let mut satisfied = 0;
        for trial in 0..opts.trials {
            let a_s = kaiming_uniform(d_in, opts.r, &ortho_stream(opts.seed, d_in, trial, 0))?;
            let a_t = kaiming_uniform(d_in, opts.r, &ortho_stream(opts.seed, d_in, trial, 1))?;
            let b_s = unit_gaussian(opts.r, opts.d_out, &ortho_stream(opts.seed, d_in, trial, 2));
            let b_t = unit_gaussian(opts.r, opts.d_out, &ortho_stream(opts.seed, d_in, trial, 3));
            values.push(normalized_pair_inner(&a_s, &b_s, &a_t, &b_t)?);
            if gram_norm(&a_s, &a_t)? <= bound {
                satisfied += 1;
            }
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        out.push(DecayPoint { d_in, mean, std: libm::sqrt(var), bound, satisfaction: satisfied as f64 / n });
    }
    Ok(out)
}

/// Symmetric matrix of normalized delta inner products between trained adapters.
///
/// Entries involving an all-zero delta are `None`.
pub fn trained_pair_inner<T: LowRank>(adapters: &[&[T]]) -> Result<Vec<Vec<Option<f64>>>> {
    if adapters.len() < 2 {
        return Err(Error::arg("need at least two adapters"));
    }
    for ad in adapters {
        if ad.len() != adapters[0].len() {
            return Err(Error::arg("adapters cover different slot counts"));
        }
        for (x, y) in ad.iter().zip(adapters[0].iter()) {
            let (sx, sy) = (x.shape(), y.shape());
            if (sx.d_in, sx.d_out) != (sy.d_in, sy.d_out) {
                return Err(Error::Dimension { op: "trained_pair_inner", left: (sx.d_in, sx.d_out), right: (sy.d_in, sy.d_out) });
            }
        }
    }
    let n = adapters.len();
    let mut out = alloc::vec![alloc::vec![None; n]; n];
    for s in 0..n {
        for t in s..n {
            let v = normalized_delta_inner(adapters[s], adapters[t])?;
            out[s][t] = v;
            out[t][s] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_reference_values() {
        // r = 32, d_in = 4096, δ = 0.05: 32 · sqrt(18 ln(40960) / 4096).
        let b = hoeffding_bound(32, 4096, 0.05).unwrap();
        assert!((b - 6.9136).abs() < 1e-3, "{b}");
        let one = hoeffding_bound(1, 18, 2.0 / core::f64::consts::E).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_monotonicity() {
        let base = hoeffding_bound(8, 512, 0.1).unwrap();
        assert!(hoeffding_bound(8, 1024, 0.1).unwrap() < base);
        assert!(hoeffding_bound(9, 512, 0.1).unwrap() > base);
        assert!(hoeffding_bound(8, 512, 0.05).unwrap() > base);
        assert!(hoeffding_bound(8, 1 << 30, 0.1).unwrap() < 1e-2);
    }

    #[test]
    fn bound_rejects_bad_delta() {
        assert!(hoeffding_bound(4, 64, 0.0).is_err());
        assert!(hoeffding_bound(4, 64, 1.0).is_err());
    }

    #[test]
    fn identical_projections_are_far_from_orthogonal() {
        let r = 8;
        let a = kaiming_uniform(4096, r, &ortho_stream(1, 4096, 0, 0)).unwrap();
        let self_norm = gram_norm(&a, &a).unwrap();
        // Diagonal of AᵀA ≈ 1, so ‖AᵀA‖_F ≈ sqrt(r); independent pairs are O(r / sqrt(d_in)).
        assert!((self_norm - (r as f64).sqrt()).abs() < 0.2, "{self_norm}");
        let report = gram_trials(r, 4096, 0.05, 1, 1).unwrap();
        assert!(report.norms[0] < 0.5);
    }

    #[test]
    fn single_trial_is_reproducible() {
        let a = gram_trials(4, 256, 0.05, 1, 9).unwrap();
        let b = gram_trials(4, 256, 0.05, 1, 9).unwrap();
        assert_eq!(a.norms[0].to_bits(), b.norms[0].to_bits());
    }

    #[test]
    fn sweep_rejects_small_inputs() {
        assert!(decay_sweep(16, &[16, 64], 4, 0).is_err());
        assert!(decay_sweep(4, &[64, 32], 4, 0).is_err());
    }

    #[test]
    fn disjoint_row_supports_are_orthogonal() {
        let a_s = Matrix::from_fn(6, 2, |i, j| if i < 3 { (i + j) as f64 + 1.0 } else { 0.0 });
        let a_t = Matrix::from_fn(6, 2, |i, j| if i >= 3 { (i * j) as f64 + 0.5 } else { 0.0 });
        let b = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.3, 0.7, -1.1]]);
        assert_eq!(normalized_pair_inner(&a_s, &b, &a_t, &b).unwrap(), 0.0);
    }
}
