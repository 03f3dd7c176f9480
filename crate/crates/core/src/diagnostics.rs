//! Central limit rate for `W - W_n` and deviations of the ratio
//! `R_n = Z_{n+1}/Z_n` from the conditional mean `m_n`.

use serde::Serialize;
use statrs::function::erf::erfc;

use crate::env_model::{EnvPath, EnvironmentModel, OffspringLaw};
use crate::error::{Error, Result};
use crate::exact_engine::{distribution_of_zn, TruncatedKernel};
use crate::limit_constants::{log_normalizer, HarmonicRegime};
use crate::monte_carlo::{offspring_sum, run_replicates, substream, McEstimate, McParams, POPULATION_CAP};

/// Largest sample size for which the empirical mean is convolved exactly.
pub const MAX_EXACT_J: usize = 64;

/// Default number of extra generations used to approximate `W`.
pub const DEFAULT_EXTRA_GENERATIONS: usize = 25;

/// Miss probability of the sampling allowance on Kolmogorov distances.
pub const DKW_ALPHA: f64 = 1e-3;

/// Dvoretzky-Kiefer-Wolfowitz radius: `sup |F_N - F| ≤ ε` with probability
/// at least `1 - α`.
pub fn dkw_radius(samples: u64, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * samples as f64)).sqrt()
}

/// `ess inf m(2)/m²` over the environment states.
pub fn variance_ratio_inf(model: &EnvironmentModel) -> f64 {
    model
        .laws()
        .iter()
        .map(|l| l.second_moment() / (l.mean() * l.mean()))
        .fold(f64::INFINITY, f64::min)
}

/// Fails unless every state has `m(2)/m² > 1`.
pub fn check_clt_hypothesis(model: &EnvironmentModel) -> Result<f64> {
    let c0 = variance_ratio_inf(model);
    if c0 > 1.0 {
        Ok(c0)
    } else {
        Err(Error::HypothesisViolated(format!("ess inf m(2)/m² = {c0} is not above 1")))
    }
}

fn excess(law: &OffspringLaw) -> f64 {
    law.second_moment() / (law.mean() * law.mean()) - 1.0
}

/// Partial sum of `δ_∞²` with a bound on the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaSq {
    pub value: f64,
    /// Geometric bound on the omitted terms; infinite when some state has
    /// mean 1.
    pub tail_bound: f64,
    pub terms: usize,
}

/// `Σ_{j ≤ depth} Π_j^{-1} (m_j(2)/m_j² - 1)` along `path`.
pub fn delta_inf_sq(path: &EnvPath, model: &EnvironmentModel, depth: usize) -> Result<DeltaSq> {
    check_clt_hypothesis(model)?;
    if path.len() < depth + 1 {
        return Err(Error::PathTooShort { needed: depth + 1, len: path.len() });
    }
    let value = (0..=depth)
        .map(|j| (-path.s(j)).exp() * excess(model.law(path.state(j))))
        .sum();
    let min_mean = model.min_log_mean().exp();
    let max_excess = model.laws().iter().map(excess).fold(0.0, f64::max);
    let tail_bound = if min_mean > 1.0 {
        max_excess * (-path.s(depth + 1)).exp() / (1.0 - 1.0 / min_mean)
    } else {
        f64::INFINITY
    };
    Ok(DeltaSq { value, tail_bound, terms: depth + 1 })
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `sup_x |F_N(x) - Φ(x)|` for the empirical distribution of `xs`.
pub fn kolmogorov_distance(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let phi = normal_cdf(x);
            (phi - i as f64 / n).max((i + 1) as f64 / n - phi)
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov distance of the normalized `W - W_n` at one `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CltReport {
    pub k: usize,
    pub n: usize,
    pub m_extra: usize,
    pub distance: f64,
    /// `A_{k,n}(ε/2)`.
    pub a_kn: f64,
    pub regime: HarmonicRegime,
    pub samples: u64,
    pub seed: u64,
    /// Trajectories that hit the population cap.
    pub overflowed: u64,
    /// `C A_{k,n}(ε/2)` with `C` fitted at the smallest `n` of a series.
    pub bound: Option<f64>,
    /// Sampling allowance [`dkw_radius`] at [`DKW_ALPHA`].
    pub allowance: f64,
}

impl CltReport {
    /// The distance exceeds the fitted bound by more than the sampling
    /// allowance.
    pub fn violates_bound(&self) -> bool {
        self.bound.is_some_and(|b| self.distance > b + self.allowance)
    }
}

/// Draws of `Π_n(W - W_n)/(√Z_n δ(T^n ξ))` with `W ≈ W_{n+m}`. The quenched
/// variance `δ²(T^n ξ)` is summed over the same `m` generations, which makes
/// it the exact conditional variance of the approximated difference.
fn clt_statistics(model: &EnvironmentModel, k: usize, n: usize, m_extra: usize, params: McParams) -> (Vec<f64>, u64) {
    const BATCH: u64 = 4096;
    let tilt = model.tilted(0.0);
    let batches = params.replicates.div_ceil(BATCH) as usize;
    let parts = params.exec.map(batches, |b| {
        let start = b as u64 * BATCH;
        let end = (start + BATCH).min(params.replicates);
        let mut out = Vec::with_capacity((end - start) as usize);
        let mut overflowed = 0;
        for i in start..end {
            let mut rng = substream(params.seed, i);
            let path = EnvPath::sample(model, &tilt, n + m_extra, &mut rng);
            let mut z = k as u64;
            let mut z_n = z;
            let mut capped = false;
            for j in 0..n + m_extra {
                if j == n {
                    z_n = z;
                }
                match offspring_sum(model.law(path.state(j)), z, &mut rng) {
                    Some(next) => z = next,
                    None => {
                        z = POPULATION_CAP;
                        capped = true;
                        break;
                    }
                }
            }
            if m_extra == 0 {
                z_n = z;
            }
            overflowed += u64::from(capped);
            let growth = path.s(n + m_extra) - path.s(n);
            let delta_sq: f64 = (n..n + m_extra)
                .map(|j| (-(path.s(j) - path.s(n))).exp() * excess(model.law(path.state(j))))
                .sum();
            let diff = z as f64 * (-growth).exp() - z_n as f64;
            out.push(diff / ((z_n as f64).sqrt() * delta_sq.sqrt()));
        }
        (out, overflowed)
    });
    let mut stats = Vec::with_capacity(params.replicates as usize);
    let mut overflowed = 0;
    for (part, o) in parts {
        stats.extend(part);
        overflowed += o;
    }
    (stats, overflowed)
}

/// Empirical Kolmogorov distance of the normalized `W - W_n` from `Φ` and
/// the rate `A_{k,n}(ε/2)`.
pub fn clt_check(
    model: &EnvironmentModel,
    k: usize,
    n: usize,
    m_extra: usize,
    epsilon: f64,
    params: McParams,
) -> Result<CltReport> {
    check_clt_hypothesis(model)?;
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Domain(format!("epsilon = {epsilon} outside (0, 1]")));
    }
    if m_extra == 0 || k == 0 || params.replicates == 0 {
        return Err(Error::Domain("need m_extra ≥ 1, k ≥ 1 and at least one sample".into()));
    }
    let (mut stats, overflowed) = clt_statistics(model, k, n, m_extra, params);
    let distance = kolmogorov_distance(&mut stats);
    let (regime, log_a) = log_normalizer(model, k, epsilon / 2.0, n);
    Ok(CltReport {
        k,
        n,
        m_extra,
        distance,
        a_kn: log_a.exp(),
        regime,
        samples: params.replicates,
        seed: params.seed,
        overflowed,
        bound: None,
        allowance: dkw_radius(params.replicates, DKW_ALPHA),
    })
}

/// [`clt_check`] at each `n` with `C` fitted on the smallest `n`.
pub fn clt_series(
    model: &EnvironmentModel,
    k: usize,
    ns: &[usize],
    m_extra: usize,
    epsilon: f64,
    params: McParams,
) -> Result<Vec<CltReport>> {
    let mut reports = ns
        .iter()
        .map(|&n| clt_check(model, k, n, m_extra, epsilon, params))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = reports.iter().min_by_key(|r| r.n).copied() {
        let c = first.distance / first.a_kn;
        for r in &mut reports {
            r.bound = Some(c * r.a_kn);
        }
    }
    Ok(reports)
}

/// `B_p = 2 min{√k : k integer, k ≥ p/2}`.
pub fn mz_constant(p: f64) -> Result<f64> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Domain(format!("Marcinkiewicz-Zygmund exponent p = {p} must exceed 1")));
    }
    Ok(2.0 * (p / 2.0).ceil().max(1.0).sqrt())
}

/// `E|Z_1 - m_0|^p` starting from one individual.
pub fn centered_moment(model: &EnvironmentModel, p: f64) -> f64 {
    model
        .states()
        .map(|(w, law)| {
            let m = law.mean();
            w * law.support().map(|(i, q)| q * (i as f64 - m).abs().powf(p)).sum::<f64>()
        })
        .sum()
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `P(|M_{0,j} - m_0| > a)` for the empirical mean of `j` offspring
/// counts, by `j`-fold convolution in each state.
pub fn empirical_mean_tail(model: &EnvironmentModel, j: usize, a: f64) -> Result<f64> {
    if j == 0 {
        return Err(Error::Domain("empirical mean needs j ≥ 1".into()));
    }
    if j > MAX_EXACT_J {
        return Err(Error::JTooLarge { j, limit: MAX_EXACT_J });
    }
    if !(a >= 0.0) {
        return Err(Error::Domain(format!("deviation a = {a} must be non-negative")));
    }
    let jf = j as f64;
    Ok(model
        .states()
        .map(|(w, law)| {
            let m = law.mean();
            let mut sum = law.probs().to_vec();
            for _ in 1..j {
                sum = convolve(&sum, law.probs());
            }
            w * sum
                .iter()
                .enumerate()
                .filter(|&(s, _)| (s as f64 / jf - m).abs() > a)
                .map(|(_, &p)| p)
                .sum::<f64>()
        })
        .sum())
}

/// `Σ_j P(|M_{0,j} - m_0| > a) P_k(Z_n = j)` from the exact distribution.
pub fn ratio_mixture(kernel: &TruncatedKernel, k: usize, n: usize, a: f64) -> Result<f64> {
    let pmf = distribution_of_zn(kernel, k, n)?;
    if pmf.overflow > 0.0 {
        return Err(Error::JTooLarge { j: kernel.cap() + 1, limit: MAX_EXACT_J });
    }
    let mut total = 0.0;
    for (j, &p) in pmf.values.iter().enumerate() {
        if p > 0.0 {
            total += p * empirical_mean_tail(kernel.model(), j, a)?;
        }
    }
    Ok(total)
}

/// Simulated `P_k(|R_n - m_n| > a)` next to its moment bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioDeviation {
    pub k: usize,
    pub n: usize,
    pub a: f64,
    pub p: f64,
    pub estimate: McEstimate,
    /// `C_p a^{-p} A_{k,n}(r)` with `r = p - 1` for `p ≤ 2`, `p/2` above.
    pub bound: f64,
    /// `B_p^p E|Z_1 - m_0|^p`.
    pub c_p: f64,
    pub a_kn: f64,
    pub regime: HarmonicRegime,
}

impl RatioDeviation {
    /// The estimate exceeds the bound by more than three standard errors.
    pub fn exceeds_bound(&self) -> bool {
        self.estimate.mean > self.bound + 3.0 * self.estimate.stderr
    }
}

pub fn ratio_deviation(
    model: &EnvironmentModel,
    k: usize,
    n: usize,
    a: f64,
    p: f64,
    params: McParams,
) -> Result<RatioDeviation> {
    if !(a > 0.0) {
        return Err(Error::Domain(format!("deviation a = {a} must be positive")));
    }
    if k == 0 {
        return Err(Error::Domain("initial size must be at least 1".into()));
    }
    let b_p = mz_constant(p)?;
    let c_p = b_p.powf(p) * centered_moment(model, p);
    let r = if p <= 2.0 { p - 1.0 } else { p / 2.0 };
    let (regime, log_a) = log_normalizer(model, k, r, n);
    let a_kn = log_a.exp();
    let tilt = model.tilted(0.0);
    let acc = run_replicates(params, 0, |rng| {
        let path = EnvPath::sample(model, &tilt, n + 1, rng);
        let mut z = k as u64;
        for j in 0..n {
            z = offspring_sum(model.law(path.state(j)), z, rng).unwrap_or(POPULATION_CAP);
        }
        let law = model.law(path.state(n));
        let next = offspring_sum(law, z, rng).unwrap_or(POPULATION_CAP);
        let ratio = next as f64 / z as f64;
        f64::from(u8::from((ratio - law.mean()).abs() > a))
    });
    Ok(RatioDeviation {
        k,
        n,
        a,
        p,
        estimate: acc.finish(0.0, params.seed),
        bound: c_p * a.powf(-p) * a_kn,
        c_p,
        a_kn,
        regime,
    })
}

/// [`ratio_deviation`] at each `n`.
pub fn ratio_deviation_series(
    model: &EnvironmentModel,
    k: usize,
    ns: &[usize],
    a: f64,
    p: f64,
    params: McParams,
) -> Result<Vec<RatioDeviation>> {
    ns.iter().map(|&n| ratio_deviation(model, k, n, a, p, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::fixtures::*;
    use crate::rate_fn::c_r;
    use approx::assert_relative_eq;

    #[test]
    fn delta_for_galton_watson() {
        let model = gw_half();
        assert_relative_eq!(check_clt_hypothesis(&model).unwrap(), 2.5 / 2.25, epsilon = 1e-15);
        let path = EnvPath::new(&model, vec![0; 120]).unwrap();
        let d = delta_inf_sq(&path, &model, 100).unwrap();
        assert!((d.value - 1.0 / 3.0).abs() <= d.tail_bound + 1e-15);
        assert!((d.value + d.tail_bound - 1.0 / 3.0).abs() < 1e-10);
        let first = delta_inf_sq(&path, &model, 0).unwrap();
        assert_relative_eq!(first.value, 2.5 / 2.25 - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn delta_tail_bound_shrinks() {
        let model = two_env();
        let path = EnvPath::new(&model, (0..80).map(|i| i % 2).collect()).unwrap();
        let bounds: Vec<f64> = [10, 20, 40].iter().map(|&d| delta_inf_sq(&path, &model, d).unwrap().tail_bound).collect();
        assert!(bounds.windows(2).all(|w| w[1] < 0.1 * w[0]));
        let partial: Vec<f64> = (0..40).map(|d| delta_inf_sq(&path, &model, d).unwrap().value).collect();
        assert!(partial.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn hypothesis_violation() {
        let model = EnvironmentModel::from_pmfs("det", &[(1.0, vec![(2, 1.0)])], 8).unwrap();
        assert!(matches!(check_clt_hypothesis(&model), Err(Error::HypothesisViolated(_))));
        let path = EnvPath::new(&model, vec![0; 3]).unwrap();
        assert!(delta_inf_sq(&path, &model, 1).is_err());
    }

    #[test]
    fn mz_examples() {
        assert_eq!(mz_constant(1.5).unwrap(), 2.0);
        assert_eq!(mz_constant(2.0).unwrap(), 2.0);
        assert_relative_eq!(mz_constant(5.0).unwrap(), 2.0 * 3f64.sqrt(), epsilon = 1e-15);
        assert!(mz_constant(1.0).is_err());
    }

    #[test]
    fn empirical_mean_examples() {
        let model = gw_half();
        assert_eq!(empirical_mean_tail(&model, 1, 0.4).unwrap(), 1.0);
        assert_relative_eq!(empirical_mean_tail(&model, 2, 0.4).unwrap(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(empirical_mean_tail(&model, 2, 0.0).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(empirical_mean_tail(&two_env(), 3, 0.0).unwrap(), 1.0);
        assert!(matches!(empirical_mean_tail(&model, 65, 0.4), Err(Error::JTooLarge { j: 65, limit: 64 })));
    }

    #[test]
    fn kolmogorov_of_exact_quantiles() {
        let n = 1000;
        let mut xs: Vec<f64> = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) / n as f64;
                crate::numeric::bisect(|x| normal_cdf(x) - u, -10.0, 10.0)
            })
            .collect();
        assert!((kolmogorov_distance(&mut xs) - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn clt_rate_example() {
        let model = gw_half();
        let r = clt_check(&model, 1, 6, 25, 1.0, McParams::new(2000, 1)).unwrap();
        assert_eq!(r.regime, HarmonicRegime::Sub);
        assert_relative_eq!(r.a_kn, c_r(&model, 0.5).powi(6), max_relative = 1e-14);
        assert_relative_eq!(c_r(&model, 0.5), 1.5f64.powf(-0.5), epsilon = 1e-15);
        assert!((0.0..=1.0).contains(&r.distance));
    }

    #[test]
    fn ratio_bound_example() {
        let model = gw_half();
        let dev = ratio_deviation(&model, 1, 5, 0.4, 2.0, McParams::new(20_000, 4)).unwrap();
        assert_relative_eq!(dev.c_p, 1.0, epsilon = 1e-15);
        assert_relative_eq!(dev.bound, 0.4f64.powi(-2) * (2.0f64 / 3.0).powi(5), max_relative = 1e-13);
        assert!(!dev.exceeds_bound());
        let far = ratio_deviation(&model, 1, 3, 1.0, 2.0, McParams::new(5_000, 4)).unwrap();
        assert_eq!(far.estimate.mean, 0.0);
        assert!(far.bound > 0.0);
    }

    #[test]
    fn ratio_matches_mixture() {
        let model = two_env();
        let kernel = TruncatedKernel::new(&model, 64).unwrap();
        let exact = ratio_mixture(&kernel, 1, 3, 0.4).unwrap();
        let dev = ratio_deviation(&model, 1, 3, 0.4, 2.0, McParams::new(50_000, 6)).unwrap();
        assert!((dev.estimate.mean - exact).abs() < 3.0 * dev.estimate.stderr, "{exact} {dev:?}");
    }
}
