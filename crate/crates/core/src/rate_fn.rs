//! Log-Laplace calculus of `X = log m_0` and the lower large deviation
//! rate functions of `Z_n`.

use serde::Serialize;

use crate::env_model::EnvironmentModel;
use crate::error::{Error, Result};
use crate::exact_engine::{distribution_of_zn, harmonic_interval, Interval, TruncatedKernel};
use crate::numeric::{bisect, log_sum_exp, ExtReal};
use crate::small_value::gamma_k;

/// Points in the coarse search for `θ_k^*`.
const THETA_GRID: usize = 512;
/// Points in the `r` grid of the Markov bound.
const MARKOV_GRID: usize = 64;
/// Search limit for exponents; beyond it a root is reported as infinite.
const EXPONENT_LIMIT: f64 = 1e6;

/// `Λ(λ)` and `Λ'(λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogLaplace {
    pub value: f64,
    pub derivative: f64,
}

pub fn log_laplace(model: &EnvironmentModel, lambda: f64) -> LogLaplace {
    let terms: Vec<(f64, f64)> = model
        .states()
        .map(|(w, l)| (w.ln() + lambda * l.log_mean(), l.log_mean()))
        .collect();
    let value = log_sum_exp(terms.iter().map(|t| t.0));
    let derivative = terms.iter().map(|(lw, x)| (lw - value).exp() * x).sum();
    LogLaplace { value, derivative }
}

/// `c_r = E[m_0^{-r}]`.
pub fn c_r(model: &EnvironmentModel, r: f64) -> f64 {
    log_laplace(model, -r).value.exp()
}

/// Root `r_k` of `c_r = γ_k`.
pub fn solve_r_k(model: &EnvironmentModel, k: usize) -> ExtReal {
    let gamma = gamma_k(model, k);
    if gamma <= 0.0 {
        return ExtReal::PosInfinity;
    }
    let target = gamma.ln();
    let f = |r: f64| log_laplace(model, -r).value - target;
    match upper_bracket(|r| f(r) < 0.0) {
        Some(hi) => ExtReal::Finite(bisect(f, 0.0, hi)),
        None => ExtReal::PosInfinity,
    }
}

/// Root `a_k` of `E[p_1^k m_0^a] = 1`.
pub fn solve_a_k(model: &EnvironmentModel, k: usize) -> ExtReal {
    let terms: Vec<(f64, f64)> = model
        .states()
        .filter(|(_, l)| l.p1() > 0.0)
        .map(|(w, l)| (w.ln() + k as f64 * l.p1().ln(), l.log_mean()))
        .collect();
    if terms.is_empty() {
        return ExtReal::PosInfinity;
    }
    let f = |a: f64| log_sum_exp(terms.iter().map(|(c, x)| c + a * x));
    match upper_bracket(|a| f(a) > 0.0) {
        Some(hi) => ExtReal::Finite(bisect(f, 0.0, hi)),
        None => ExtReal::PosInfinity,
    }
}

fn upper_bracket(done: impl Fn(f64) -> bool) -> Option<f64> {
    let mut hi = 1.0;
    while !done(hi) {
        hi *= 2.0;
        if hi > EXPONENT_LIMIT {
            return None;
        }
    }
    Some(hi)
}

/// `Λ*(θ)` together with the maximizing `λ_θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Legendre {
    pub value: ExtReal,
    pub lambda: f64,
}

/// Fenchel-Legendre transform of `Λ` on `(0, μ]`.
pub fn legendre(model: &EnvironmentModel, theta: f64) -> Result<Legendre> {
    let mu = model.mu();
    if !(theta > 0.0 && theta <= mu) {
        return Err(Error::Domain(format!("theta = {theta} outside (0, mu = {mu}]")));
    }
    if theta == mu {
        return Ok(Legendre { value: ExtReal::Finite(0.0), lambda: 0.0 });
    }
    let x_min = model.min_log_mean();
    if theta < x_min || model.max_log_mean() == x_min {
        return Ok(Legendre { value: ExtReal::PosInfinity, lambda: f64::NEG_INFINITY });
    }
    if theta == x_min {
        let mass: f64 = model.states().filter(|(_, l)| l.log_mean() == x_min).map(|(w, _)| w).sum();
        return Ok(Legendre { value: ExtReal::Finite(-mass.ln()), lambda: f64::NEG_INFINITY });
    }
    let slope = |lambda: f64| log_laplace(model, lambda).derivative - theta;
    let mut lo = -1.0;
    while slope(lo) > 0.0 {
        lo *= 2.0;
    }
    let lambda = bisect(slope, lo, 0.0);
    let value = lambda * theta - log_laplace(model, lambda).value;
    Ok(Legendre { value: ExtReal::Finite(value.max(0.0)), lambda })
}

/// Critical quantities for a model and an initial size `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriticalConstants {
    pub k: usize,
    pub gamma_k: f64,
    pub r_k: ExtReal,
    pub a_k: ExtReal,
    /// `Λ'(-r_k)`; the essential infimum of `X` when `r_k` is infinite.
    pub theta_k: f64,
    pub mu: f64,
    pub rho_k: ExtReal,
}

pub fn critical_constants(model: &EnvironmentModel, k: usize) -> CriticalConstants {
    let gamma = gamma_k(model, k);
    let r_k = solve_r_k(model, k);
    let theta_k = match r_k {
        ExtReal::Finite(r) => log_laplace(model, -r).derivative,
        ExtReal::PosInfinity => model.min_log_mean(),
    };
    CriticalConstants {
        k,
        gamma_k: gamma,
        r_k,
        a_k: solve_a_k(model, k),
        theta_k,
        mu: model.mu(),
        rho_k: if gamma > 0.0 { ExtReal::Finite(-gamma.ln()) } else { ExtReal::PosInfinity },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Linear,
    Smooth,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Linear => "linear",
            Regime::Smooth => "smooth",
        }
    }
}

/// One point of the rate function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub theta: f64,
    pub chi_star: f64,
    pub lambda_star: ExtReal,
    pub i_k: f64,
    pub regime: Regime,
    /// `-r_k` on the linear branch, `λ_θ` on the smooth branch.
    pub lambda_theta: f64,
}

/// Rate function `χ*_k` with the constants it depends on.
#[derive(Debug, Clone)]
pub struct RateFunction<'a> {
    model: &'a EnvironmentModel,
    constants: CriticalConstants,
    r_k: f64,
    rho_k: f64,
    theta_star: f64,
}

impl<'a> RateFunction<'a> {
    pub fn new(model: &'a EnvironmentModel, k: usize) -> Result<Self> {
        let constants = critical_constants(model, k);
        let r_k = constants.r_k.finite().ok_or(Error::InfiniteCritical)?;
        let rho_k = constants.rho_k.to_f64();
        let theta_star = theta_star(model, rho_k)?;
        Ok(Self { model, constants, r_k, rho_k, theta_star })
    }

    pub fn constants(&self) -> &CriticalConstants {
        &self.constants
    }

    /// The minimizer `θ_k^*` of `(Λ*(θ) - ρ_k)/θ`.
    pub fn theta_star(&self) -> f64 {
        self.theta_star
    }

    /// `χ*_k(θ)`: linear below `θ_k`, `Λ*` above.
    pub fn chi_star(&self, theta: f64) -> Result<RatePoint> {
        let lt = legendre(self.model, theta)?;
        let i_k = self.bansaye(theta)?;
        let point = if theta < self.constants.theta_k {
            RatePoint {
                theta,
                chi_star: -self.r_k * theta + self.rho_k,
                lambda_star: lt.value,
                i_k,
                regime: Regime::Linear,
                lambda_theta: -self.r_k,
            }
        } else {
            RatePoint {
                theta,
                chi_star: lt.value.to_f64(),
                lambda_star: lt.value,
                i_k,
                regime: Regime::Smooth,
                lambda_theta: lt.lambda,
            }
        };
        Ok(point)
    }

    /// `I_k(θ)` in the variational form built on `θ_k^*`.
    pub fn bansaye(&self, theta: f64) -> Result<f64> {
        let mu = self.model.mu();
        if !(theta > 0.0 && theta <= mu) {
            return Err(Error::Domain(format!("theta = {theta} outside (0, mu = {mu}]")));
        }
        let ts = self.theta_star;
        if theta <= ts {
            let at_star = legendre(self.model, ts)?.value.to_f64();
            Ok(self.rho_k * (1.0 - theta / ts) + theta / ts * at_star)
        } else {
            Ok(legendre(self.model, theta)?.value.to_f64())
        }
    }
}

/// Maximizer of `(ρ - Λ*(θ))/θ` on `(0, μ]`: a grid search over the region
/// where `Λ*` is finite followed by bisection on the sign of a
/// central-difference slope.
fn theta_star(model: &EnvironmentModel, rho: f64) -> Result<f64> {
    let mu = model.mu();
    if model.max_log_mean() == model.min_log_mean() {
        return Ok(mu);
    }
    let objective = |theta: f64| -> f64 {
        match legendre(model, theta).map(|l| l.value) {
            Ok(ExtReal::Finite(v)) => (v - rho) / theta,
            _ => f64::INFINITY,
        }
    };
    let floor = model.min_log_mean().max(0.0);
    let lo = floor + 0.01 * (mu - floor);
    let hi = floor + 0.99 * (mu - floor);
    let step = (hi - lo) / (THETA_GRID - 1) as f64;
    let grid: Vec<f64> = (0..THETA_GRID).map(|i| lo + i as f64 * step).collect();
    let (best, _) = grid
        .iter()
        .map(|&t| objective(t))
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let left = if best == 0 { 0.5 * (floor + lo) } else { grid[best - 1] };
    let right = if best + 1 == grid.len() { mu } else { grid[best + 1] };
    let h = 1e-6 * (mu - floor);
    let slope = |t: f64| {
        let a = (t - h).max(floor + 0.5 * h);
        let b = (t + h).min(mu);
        (objective(b) - objective(a)) / (b - a)
    };
    if slope(left) >= 0.0 {
        return Ok(left);
    }
    if slope(right) <= 0.0 {
        return Ok(right);
    }
    Ok(bisect(slope, left, right))
}

/// `χ*_k(θ)` at a single point.
pub fn chi_star(model: &EnvironmentModel, k: usize, theta: f64) -> Result<RatePoint> {
    RateFunction::new(model, k)?.chi_star(theta)
}

/// `I_k(θ)` at a single point.
pub fn bansaye_rate(model: &EnvironmentModel, k: usize, theta: f64) -> Result<f64> {
    RateFunction::new(model, k)?.bansaye(theta)
}

/// `⌊e^{θ n}⌋`, the largest population counted in `{Z_n ≤ e^{θn}}`.
pub fn deviation_threshold(theta: f64, n: usize) -> u64 {
    let x = (theta * n as f64).exp().floor();
    if x >= u64::MAX as f64 {
        u64::MAX
    } else {
        x as u64
    }
}

/// Minimum over an `r` grid of `E_k[Z_n^{-r}] e^{θ r n}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarkovBound {
    pub bound: f64,
    pub r_at_min: f64,
}

/// Markov bound from an oracle returning intervals for `E_k[Z_n^{-r}]`.
pub fn markov_bound_with<F>(oracle: F, r_k: ExtReal, theta: f64, n: usize) -> Result<MarkovBound>
where
    F: Fn(f64) -> Result<Interval>,
{
    if n == 0 {
        return Ok(MarkovBound { bound: 1.0, r_at_min: 0.0 });
    }
    let r_max = match r_k {
        ExtReal::Finite(r) => 4.0 * r,
        ExtReal::PosInfinity => 64.0,
    }
    .max(0.02);
    let (lo, hi) = (0.01f64.ln(), r_max.ln());
    let mut best = MarkovBound { bound: 1.0, r_at_min: 0.0 };
    for i in 0..MARKOV_GRID {
        let r = (lo + (hi - lo) * i as f64 / (MARKOV_GRID - 1) as f64).exp();
        let value = oracle(r)?.upper * (theta * r * n as f64).exp();
        if value < best.bound {
            best = MarkovBound { bound: value, r_at_min: r };
        }
    }
    Ok(best)
}

/// Markov bound with the truncated-kernel harmonic intervals as oracle.
pub fn markov_bound(kernel: &TruncatedKernel, k: usize, theta: f64, n: usize) -> Result<MarkovBound> {
    let model = kernel.model();
    let mu = model.mu();
    if !(theta > 0.0 && theta < mu) {
        return Err(Error::Domain(format!("theta = {theta} outside (0, mu = {mu})")));
    }
    let pmf = distribution_of_zn(kernel, k, n)?;
    markov_bound_with(|r| Ok(harmonic_interval(&pmf, r)), solve_r_k(model, k), theta, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::fixtures::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn log_laplace_examples() {
        assert_eq!(log_laplace(&two_env(), 0.0).value, 0.0);
        assert_relative_eq!(log_laplace(&gw_half(), 2.5).value, 2.5 * 1.5f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(log_laplace(&two_env(), -1.0).value, (11.0f64 / 18.0).ln(), epsilon = 1e-15);
        assert_relative_eq!(log_laplace(&two_env(), 0.0).derivative, two_env().mu(), epsilon = 1e-15);
    }

    #[test]
    fn c_r_examples() {
        assert_relative_eq!(c_r(&two_env(), 1.0), 11.0 / 18.0, epsilon = 1e-15);
        assert!((c_r(&geo_half(), 1.0) - 0.5).abs() < 1e-11);
        assert!((c_r(&two_env(), 1e-12) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn r_k_examples() {
        let geo = solve_r_k(&geo_half(), 1).finite().unwrap();
        assert!((geo - 1.0).abs() < 1e-8, "{geo}");
        let gw = solve_r_k(&gw_half(), 1).finite().unwrap();
        assert_relative_eq!(gw, 2f64.ln() / 1.5f64.ln(), epsilon = 1e-14);
        let two = solve_r_k(&two_env(), 1).finite().unwrap();
        assert!(two > 2.14 && two < 2.16, "{two}");
        assert!((c_r(&two_env(), two) - 0.35).abs() < 1e-12);
        let none = EnvironmentModel::from_pmfs("x", &[(1.0, vec![(2, 1.0)])], 64).unwrap();
        assert_eq!(solve_r_k(&none, 1), ExtReal::PosInfinity);
        assert_eq!(solve_a_k(&none, 1), ExtReal::PosInfinity);
    }

    #[test]
    fn a_k_examples() {
        let r1 = 2f64.ln() / 1.5f64.ln();
        assert_relative_eq!(solve_a_k(&gw_half(), 1).finite().unwrap(), r1, epsilon = 1e-13);
        assert_relative_eq!(solve_a_k(&gw_half(), 2).finite().unwrap(), 2.0 * r1, epsilon = 1e-13);
        assert_relative_eq!(solve_r_k(&gw_half(), 2).finite().unwrap(), 2.0 * r1, epsilon = 1e-13);
        let a1 = solve_a_k(&two_env(), 1).finite().unwrap();
        let lhs = 0.25 * 1.5f64.powf(a1) + 0.1 * 1.8f64.powf(a1);
        assert!((lhs - 1.0).abs() < 1e-12);
        assert!((a1 - solve_r_k(&two_env(), 1).finite().unwrap()).abs() > 1e-3);
    }

    #[test]
    fn legendre_examples() {
        let model = two_env();
        let at_mu = legendre(&model, model.mu()).unwrap();
        assert_eq!(at_mu.value, ExtReal::Finite(0.0));
        assert!(legendre(&gw_half(), 0.2).unwrap().value.is_infinite());
        let l = legendre(&model, 0.45).unwrap();
        let v = l.value.finite().unwrap();
        assert!(v > 0.0 && l.lambda < 0.0);
        let sup = (0..=400_000)
            .map(|i| -40.0 + i as f64 * 1e-4)
            .map(|lam| lam * 0.45 - log_laplace(&model, lam).value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((sup - v).abs() < 1e-8);
        assert!(legendre(&model, 0.3).unwrap().value.is_infinite());
        assert!(legendre(&model, -0.1).is_err());
    }

    #[test]
    fn chi_star_gw() {
        let model = gw_half();
        let rf = RateFunction::new(&model, 1).unwrap();
        let p = rf.chi_star(0.2).unwrap();
        let r1 = 2f64.ln() / 1.5f64.ln();
        assert_relative_eq!(p.chi_star, -r1 * 0.2 + 2f64.ln(), epsilon = 1e-14);
        assert_eq!(p.regime, Regime::Linear);
        let near = rf.chi_star(1.5f64.ln() * (1.0 - 1e-12)).unwrap();
        assert!(near.chi_star.abs() < 1e-10);
        assert!((p.i_k - p.chi_star).abs() < 1e-12);
    }

    #[test]
    fn chi_star_continuity_two_env() {
        let model = two_env();
        let rf = RateFunction::new(&model, 1).unwrap();
        let c = *rf.constants();
        assert!((c.theta_k - 0.479).abs() < 1e-3, "{}", c.theta_k);
        let r = c.r_k.finite().unwrap();
        let left = -r * c.theta_k + c.rho_k.to_f64();
        let right = legendre(&two_env(), c.theta_k).unwrap().value.to_f64();
        assert!((left - right).abs() < 1e-9);
        assert!((rf.theta_star() - c.theta_k).abs() < 1e-6);
    }

    #[test]
    fn infinite_critical() {
        let none = EnvironmentModel::from_pmfs("x", &[(0.5, vec![(2, 1.0)]), (0.5, vec![(3, 1.0)])], 64).unwrap();
        assert!(matches!(chi_star(&none, 1, 0.5), Err(Error::InfiniteCritical)));
    }

    #[test]
    fn markov_bound_dominates() {
        let kernel = TruncatedKernel::new(&two_env(), 2048).unwrap();
        let b = markov_bound(&kernel, 1, 0.3, 10).unwrap();
        let pmf = distribution_of_zn(&kernel, 1, 10).unwrap();
        let x = deviation_threshold(0.3, 10) as usize;
        assert!(b.bound > pmf.cdf(x));
        let gw = TruncatedKernel::new(&gw_half(), 1024).unwrap();
        let b = markov_bound(&gw, 1, 0.2, 8).unwrap();
        let pmf = distribution_of_zn(&gw, 1, 8).unwrap();
        assert!(b.bound > pmf.cdf(deviation_threshold(0.2, 8) as usize));
        assert_eq!(markov_bound_with(|_| unreachable!(), ExtReal::Finite(1.0), 0.2, 0).unwrap().bound, 1.0);
    }

    #[test]
    fn thresholds_monotone() {
        let r: Vec<f64> = (1..6).map(|k| solve_r_k(&two_env(), k).to_f64()).collect();
        assert!(r.windows(2).all(|w| w[1] > w[0]));
    }

    proptest! {
        #[test]
        fn lambda_convex(a in -8.0f64..4.0, h in 1e-3f64..0.5) {
            let m = two_env();
            let d2 = log_laplace(&m, a + h).value - 2.0 * log_laplace(&m, a).value + log_laplace(&m, a - h).value;
            prop_assert!(d2 >= -1e-12);
        }

        #[test]
        fn c_r_matches_exp_lambda(r in 0.0f64..10.0) {
            let m = two_env();
            let direct = 0.5 * 1.5f64.powf(-r) + 0.5 * 1.8f64.powf(-r);
            prop_assert!((c_r(&m, r) - direct).abs() < 1e-12);
        }

        #[test]
        fn duality_on_smooth_branch(u in 0.0f64..1.0) {
            let m = two_env();
            let rf = RateFunction::new(&m, 1).unwrap();
            let theta_k = rf.constants().theta_k;
            let theta = theta_k + u * (m.mu() - theta_k) * 0.999;
            let l = legendre(&m, theta).unwrap();
            let r = rf.constants().r_k.to_f64();
            prop_assert!(l.lambda >= -r - 1e-9 && l.lambda <= 0.0);
            let v = l.value.to_f64();
            prop_assert!((v - (l.lambda * theta - log_laplace(&m, l.lambda).value)).abs() < 1e-12);
        }

        #[test]
        fn chi_nonnegative_and_regime(u in 0.02f64..0.98) {
            let m = two_env();
            let rf = RateFunction::new(&m, 1).unwrap();
            let p = rf.chi_star(u * m.mu()).unwrap();
            prop_assert!(p.chi_star >= 0.0);
            prop_assert_eq!(p.regime == Regime::Linear, p.theta < rf.constants().theta_k);
        }
    }
}
