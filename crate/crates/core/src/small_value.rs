//! Small-value probabilities: `γ_k`, the limits
//! `q_{k,j} = lim P_k(Z_n = j)/γ_k^n` and their generating series `Q_k`.

use serde::Serialize;

use crate::env_model::EnvironmentModel;
use crate::error::{Error, Result};
use crate::exact_engine::{distribution_sequence, TruncatedKernel};
use crate::exec::Exec;

/// Guard on `γ_k - p(j, j)` in the q recurrence.
pub const DENOMINATOR_EPSILON: f64 = 1e-12;

/// Relative slack allowed when checking that a sequence is non-decreasing.
const MONOTONE_SLACK: f64 = 1e-12;

/// `γ_k = P_k(Z_1 = k) = E[p_1(ξ_0)^k]`.
pub fn gamma_k(model: &EnvironmentModel, k: usize) -> f64 {
    model.states().map(|(w, l)| w * l.p1().powi(k as i32)).sum()
}

/// Sizes reachable from `k` through the kernel graph, up to `j_max`.
pub fn accessible_states(kernel: &TruncatedKernel, k: usize, j_max: usize) -> Vec<bool> {
    let mut reach = vec![false; j_max + 1];
    if k > j_max {
        return reach;
    }
    reach[k] = true;
    for i in k..=j_max {
        if !reach[i] {
            continue;
        }
        let (start, probs) = kernel.row(i);
        for (d, &p) in probs.iter().enumerate() {
            let j = start + d;
            if j > j_max {
                break;
            }
            if p > 0.0 {
                reach[j] = true;
            }
        }
    }
    reach
}

/// Coefficients `q_{k,j}` for `k ≤ j ≤ J`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QTable {
    pub k: usize,
    pub j_max: usize,
    pub gamma: f64,
    /// `q[j]` for `0 ≤ j ≤ J`; zero below `k`.
    pub q: Vec<f64>,
    pub accessible: Vec<bool>,
}

impl QTable {
    pub fn q(&self, j: usize) -> f64 {
        self.q.get(j).copied().unwrap_or(0.0)
    }

    /// Ratio of the last two nonzero coefficients.
    pub fn growth(&self) -> f64 {
        let mut nz = self.q.iter().rev().filter(|&&x| x > 0.0);
        match (nz.next(), nz.next()) {
            (Some(last), Some(prev)) => last / prev,
            _ => 0.0,
        }
    }

    /// `Σ_{j ≤ J} j^{-r} q_{k,j}`.
    pub fn harmonic_sum(&self, r: f64) -> f64 {
        self.q
            .iter()
            .enumerate()
            .skip(self.k)
            .filter(|(_, q)| **q > 0.0)
            .map(|(j, q)| (j as f64).powf(-r) * q)
            .sum()
    }

    /// Largest residual of `γ_k q_j = Σ_{i ≤ j} p(i, j) q_i` over the table.
    pub fn recurrence_residual(&self, kernel: &TruncatedKernel) -> f64 {
        (self.k..=self.j_max)
            .map(|j| {
                let rhs: f64 = (self.k..=j).map(|i| kernel.p(i, j) * self.q[i]).sum();
                (self.gamma * self.q[j] - rhs).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Solves the q recurrence forward in `j`.
pub fn q_table(kernel: &TruncatedKernel, k: usize, j_max: usize) -> Result<QTable> {
    if k == 0 || j_max > kernel.cap() || k > j_max {
        return Err(Error::Domain(format!(
            "q table needs 1 ≤ k ≤ J ≤ cap, got k = {k}, J = {j_max}, cap = {}",
            kernel.cap()
        )));
    }
    let gamma = kernel.p(k, k);
    let accessible = accessible_states(kernel, k, j_max);
    let mut q = vec![0.0; j_max + 1];
    let mut acc = vec![0.0; j_max + 1];
    for j in k..=j_max {
        if j == k {
            q[j] = 1.0;
        } else if accessible[j] {
            let denominator = gamma - kernel.p(j, j);
            if denominator <= DENOMINATOR_EPSILON {
                return Err(Error::DegenerateDenominator { j, denominator });
            }
            q[j] = acc[j] / denominator;
        }
        if q[j] > 0.0 {
            let (start, probs) = kernel.row(j);
            for (d, &p) in probs.iter().enumerate().skip(1) {
                let col = start + d;
                if col > j_max {
                    break;
                }
                acc[col] += p * q[j];
            }
        }
    }
    Ok(QTable { k, j_max, gamma, q, accessible })
}

/// `P_k(Z_n = j)/γ_k^n` for `n = 1..=n_max` next to its limit `q_{k,j}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneLimit {
    pub ratios: Vec<f64>,
    pub limit: f64,
    pub gap: f64,
}

pub fn verify_monotone_limit(kernel: &TruncatedKernel, k: usize, j: usize, n_max: usize) -> Result<MonotoneLimit> {
    verify_monotone_limit_with(kernel, k, j, n_max, Exec::default())
}

pub fn verify_monotone_limit_with(
    kernel: &TruncatedKernel,
    k: usize,
    j: usize,
    n_max: usize,
    exec: Exec,
) -> Result<MonotoneLimit> {
    let table = q_table(kernel, k, j)?;
    if !table.accessible[j] {
        return Err(Error::Domain(format!("size {j} is not accessible from {k}")));
    }
    let seq = distribution_sequence(kernel, k, n_max, exec)?;
    let mut ratios = Vec::with_capacity(n_max);
    let mut gamma_pow = 1.0;
    for (n, pmf) in seq.iter().enumerate().skip(1) {
        gamma_pow *= table.gamma;
        let ratio = pmf.prob(j) / gamma_pow;
        if let Some(&previous) = ratios.last() {
            if ratio < previous * (1.0 - MONOTONE_SLACK) {
                return Err(Error::NonMonotone { n, previous, current: ratio });
            }
        }
        ratios.push(ratio);
    }
    let limit = table.q[j];
    let gap = limit - ratios.last().copied().unwrap_or(0.0);
    Ok(MonotoneLimit { ratios, limit, gap })
}

/// A truncated series value with a bound on the omitted tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesValue {
    pub value: f64,
    pub truncation_bound: f64,
    /// The bound extrapolates the last coefficient ratio and is not rigorous.
    pub heuristic: bool,
}

/// `Q_k(t) = Σ_j q_{k,j} t^j` truncated at `J`.
pub fn q_eval(table: &QTable, t: f64) -> Result<SeriesValue> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("Q_k argument {t} outside [0, 1)")));
    }
    Ok(q_eval_unchecked(table, t))
}

pub(crate) fn q_eval_unchecked(table: &QTable, t: f64) -> SeriesValue {
    let value = table.q.iter().rev().fold(0.0, |acc, &q| acc * t + q);
    let growth = table.growth();
    let last = table.q[table.j_max];
    let truncation_bound = if t == 0.0 {
        0.0
    } else if t * growth >= 1.0 {
        f64::INFINITY
    } else {
        last * t.powi(table.j_max as i32 + 1) / (1.0 - t * growth)
    };
    SeriesValue { value, truncation_bound, heuristic: true }
}

/// `|γ_k Q_k(t) - E[Q_k(f_0(t))]|` with the summed truncation bounds of
/// both sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub residual: f64,
    pub truncation_bound: f64,
}

pub fn functional_equation_residual(table: &QTable, model: &EnvironmentModel, t: f64) -> Result<Residual> {
    let lhs = q_eval(table, t)?;
    let mut rhs = 0.0;
    let mut bound = table.gamma * lhs.truncation_bound;
    for (w, law) in model.states() {
        let inner = q_eval_unchecked(table, law.pgf_unchecked(t));
        rhs += w * inner.value;
        bound += w * inner.truncation_bound;
    }
    Ok(Residual { residual: (table.gamma * lhs.value - rhs).abs(), truncation_bound: bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::fixtures::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_examples() {
        assert_relative_eq!(gamma_k(&two_env(), 1), 0.35, epsilon = 1e-15);
        assert_relative_eq!(gamma_k(&two_env(), 2), 0.145, epsilon = 1e-15);
        assert!((gamma_k(&geo_half(), 1) - 0.5).abs() < 1e-11);
        let g: Vec<f64> = (1..10).map(|k| gamma_k(&two_env(), k)).collect();
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn q_examples() {
        let gw = TruncatedKernel::new(&gw_half(), 256).unwrap();
        let t = q_table(&gw, 1, 200).unwrap();
        assert_eq!(t.q(1), 1.0);
        assert_eq!(t.q(2), 2.0);
        let two = TruncatedKernel::new(&two_env(), 256).unwrap();
        let t2 = q_table(&two, 1, 50).unwrap();
        assert!((t2.q(2) - 0.65 / 0.205).abs() < 1e-12);
        for k in 1..4 {
            let t = q_table(&two, k, 60).unwrap();
            assert_eq!(t.q(k), 1.0);
            assert!(t.recurrence_residual(&two) < 1e-10);
        }
    }

    #[test]
    fn inaccessible_states_get_zero() {
        let model = EnvironmentModel::from_pmfs("even", &[(1.0, vec![(1, 0.5), (3, 0.5)])], 64).unwrap();
        let kernel = TruncatedKernel::new(&model, 64).unwrap();
        let t = q_table(&kernel, 1, 20).unwrap();
        for j in 1..=20 {
            assert_eq!(t.accessible[j], j % 2 == 1);
            assert_eq!(t.q(j) > 0.0, j % 2 == 1);
        }
    }

    #[test]
    fn degenerate_denominator() {
        let model = EnvironmentModel::from_pmfs("no-ones", &[(1.0, vec![(2, 1.0)])], 64).unwrap();
        let kernel = TruncatedKernel::new(&model, 64).unwrap();
        let err = q_table(&kernel, 1, 4).unwrap_err();
        assert!(matches!(err, Error::DegenerateDenominator { j: 2, .. }));
    }

    #[test]
    fn monotone_limit_examples() {
        let gw = TruncatedKernel::new(&gw_half(), 512).unwrap();
        let ones = verify_monotone_limit(&gw, 1, 1, 30).unwrap();
        assert!(ones.ratios.iter().all(|&r| (r - 1.0).abs() < 1e-15));
        let twos = verify_monotone_limit(&gw, 1, 2, 40).unwrap();
        assert!((twos.ratios[39] - 2.0).abs() < 1e-6);
        let two = TruncatedKernel::new(&two_env(), 512).unwrap();
        let m = verify_monotone_limit(&two, 1, 2, 60).unwrap();
        assert!((m.ratios[59] - 0.65 / 0.205).abs() < 1e-5);
        assert!(m.gap >= -1e-12);
    }

    #[test]
    fn q_eval_examples() {
        let gw = TruncatedKernel::new(&gw_half(), 256).unwrap();
        let t = q_table(&gw, 1, 200).unwrap();
        assert_eq!(q_eval(&t, 0.0).unwrap().value, 0.0);
        let v = q_eval(&t, 0.1).unwrap();
        let head = 0.1 + 2.0 * 0.01 + t.q(3) * 0.001;
        assert!(v.value > head && v.value < head + 1e-3);
        assert!(q_eval(&t, 1.0).is_err());
    }

    #[test]
    fn functional_equation() {
        let gw = TruncatedKernel::new(&gw_half(), 256).unwrap();
        let t = q_table(&gw, 1, 200).unwrap();
        assert_eq!(functional_equation_residual(&t, &gw_half(), 0.0).unwrap().residual, 0.0);
        assert!(functional_equation_residual(&t, &gw_half(), 0.3).unwrap().residual < 1e-8);
        let two = TruncatedKernel::new(&two_env(), 512).unwrap();
        let t2 = q_table(&two, 1, 400).unwrap();
        let res = functional_equation_residual(&t2, &two_env(), 0.5).unwrap();
        assert!(res.residual < 1e-6, "{res:?}");
    }
}
