//! Two-sided bounds on `E_k[Z_n^{-r}]` by backward recursion over the
//! truncated kernel.
//!
//! With `h_ℓ(i) = E_i[Z_ℓ^{-r}]` we have `h_0(i) = i^{-r}` and
//! `h_{ℓ+1}(i) = Σ_j p(i, j) h_ℓ(j)`. Columns `j ≤ cap` are exact. Beyond the
//! cap only the mass and the first two moments of each row are known, and
//! `h_ℓ` is sandwiched between multiples of `j^{-r}`:
//!
//! * lower: `h_ℓ(j) ≥ c_r^ℓ j^{-r}` (quenched Jensen);
//! * upper: splitting `j` ancestors into `a = ⌈j/cap⌉` groups of sizes
//!   `b` or `b + 1` with `b ≥ ⌊cap/2⌋`, AM-GM and Hölder give
//!   `h_ℓ(j) ≤ a^{-r} Π_g h_ℓ(n_g)^{1/a} ≤ K_ℓ e^{r/(8b²)} j^{-r}` with
//!   `K_ℓ = max_{cap/2 ≤ b ≤ cap} b^r U_ℓ(b)`.
//!
//! For `J` beyond the cap with mean `μ` and variance `σ²`,
//! `μ^{-r} ≤ E[J^{-r}] ≤ μ^{-r} + r(r+1)(cap+1)^{-r-2} σ²/2`.

use super::{Interval, TruncatedKernel, ROW_BLOCK};
use crate::error::{Error, Result};
use crate::exec::Exec;

pub fn harmonic_moments(kernel: &TruncatedKernel, k: usize, r: f64, n_max: usize) -> Result<Vec<Interval>> {
    harmonic_moments_with(kernel, k, r, n_max, Exec::default())
}

/// Intervals for `E_k[Z_n^{-r}]`, `n = 0..=n_max`.
pub fn harmonic_moments_with(
    kernel: &TruncatedKernel,
    k: usize,
    r: f64,
    n_max: usize,
    exec: Exec,
) -> Result<Vec<Interval>> {
    let cap = kernel.cap();
    if k == 0 || k > cap {
        return Err(Error::Domain(format!("initial size {k} outside [1, {cap}]")));
    }
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("harmonic exponent r = {r} must be non-negative")));
    }
    let model = kernel.model();
    let c_r: f64 = model.states().map(|(w, l)| w * l.mean().powf(-r)).sum();
    let half = (cap / 2).max(1);
    let a = cap as f64 + 1.0;
    let curvature = 0.5 * r * (r + 1.0) * a.powf(-r - 2.0);
    let split_slack = (r / (8.0 * (half * half) as f64)).exp();

    let mut lo: Vec<f64> = (0..=cap).map(|j| if j == 0 { 0.0 } else { (j as f64).powf(-r) }).collect();
    let mut hi = lo.clone();
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(Interval { lower: lo[k], upper: hi[k] });
    let mut c_pow = 1.0;

    for _ in 0..n_max {
        let envelope = split_slack
            * (half..=cap)
                .map(|b| hi[b] * (b as f64).powf(r))
                .fold(0.0, f64::max);
        let blocks = cap.div_ceil(ROW_BLOCK);
        let parts = exec.map(blocks, |blk| {
            let first = blk * ROW_BLOCK + 1;
            let last = ((blk + 1) * ROW_BLOCK).min(cap);
            (first..=last)
                .map(|i| {
                    let (start, probs) = kernel.row(i);
                    let mut l = 0.0;
                    let mut u = 0.0;
                    for (d, &p) in probs.iter().enumerate() {
                        l += p * lo[start + d];
                        u += p * hi[start + d];
                    }
                    let mass = kernel.overflow(i);
                    if mass > 0.0 {
                        let mean = (kernel.overflow_first_moment(i) / mass).max(a);
                        let var = (kernel.overflow_second_moment(i) / mass - mean * mean).max(0.0);
                        let inv_lo = mean.powf(-r);
                        let inv_hi = (inv_lo + curvature * var).min(a.powf(-r));
                        l += mass * c_pow * inv_lo;
                        u += mass * envelope * inv_hi;
                    }
                    (l, u)
                })
                .collect::<Vec<_>>()
        });
        let mut idx = 1;
        for block in parts {
            for (l, u) in block {
                lo[idx] = l;
                hi[idx] = u;
                idx += 1;
            }
        }
        c_pow *= c_r;
        out.push(Interval { lower: lo[k], upper: hi[k] });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::fixtures::*;
    use crate::exact_engine::exact_harmonic_moment;
    use proptest::prelude::*;

    #[test]
    fn matches_forward_without_overflow() {
        let kernel = TruncatedKernel::new(&two_env(), 1024).unwrap();
        let seq = harmonic_moments(&kernel, 1, 1.3, 9).unwrap();
        for (n, iv) in seq.iter().enumerate() {
            let fwd = exact_harmonic_moment(&kernel, 1, n, 1.3).unwrap();
            assert!((iv.lower - fwd.lower).abs() < 1e-14 * fwd.lower.max(1e-300) + 1e-17);
            assert!((iv.upper - fwd.upper).abs() < 1e-13 * fwd.upper);
        }
    }

    #[test]
    fn narrower_than_forward_interval_when_truncated() {
        let kernel = TruncatedKernel::new(&gw_half(), 256).unwrap();
        let seq = harmonic_moments(&kernel, 1, 1.0, 20).unwrap();
        let fwd = exact_harmonic_moment(&kernel, 1, 20, 1.0).unwrap();
        let refined = seq[20];
        assert!(refined.upper - refined.lower < 0.01 * (fwd.upper - fwd.lower));
        assert!(refined.lower <= fwd.upper && fwd.lower <= refined.upper);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn small_cap_brackets_large_cap(cap in 8usize..80, r in 0.3f64..3.5, k in 1usize..4) {
            let model = two_env();
            let small = TruncatedKernel::new(&model, cap).unwrap();
            let large = TruncatedKernel::new(&model, 2048).unwrap();
            let a = harmonic_moments(&small, k, r, 12).unwrap();
            let b = harmonic_moments(&large, k, r, 12).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let tol = 1e-12 * y.upper;
                prop_assert!(x.lower <= y.upper + tol, "{x:?} vs {y:?}");
                prop_assert!(y.lower <= x.upper + tol, "{x:?} vs {y:?}");
                prop_assert!(x.lower <= x.upper + tol);
            }
        }
    }
}
