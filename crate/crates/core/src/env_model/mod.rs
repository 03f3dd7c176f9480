//! Finite random environments: offspring laws, weighted mixtures, tilted
//! sampling and environment paths.

mod config;

pub use config::{load_model, parse_model};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Default cap on the largest offspring count a law may charge.
pub const DEFAULT_SUPPORT_LIMIT: usize = 64;

const SUM_TOLERANCE: f64 = 1e-12;

/// Reproduction law of one environment state. `probs[i]` is `P(N = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringLaw {
    probs: Vec<f64>,
    mean: f64,
    log_mean: f64,
    second_moment: f64,
}

impl OffspringLaw {
    /// Builds a law from `(count, probability)` pairs. Repeated counts add up.
    pub fn new<I>(pmf: I, support_limit: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        Self::with_context(pmf, support_limit, "offspring law")
    }

    pub(crate) fn with_context<I>(pmf: I, support_limit: usize, context: &str) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut probs: Vec<f64> = Vec::new();
        for (i, p) in pmf {
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability { context: context.to_string(), value: p });
            }
            if p == 0.0 {
                continue;
            }
            if i > support_limit {
                return Err(Error::SupportTooLarge { support: i, limit: support_limit });
            }
            if probs.len() <= i {
                probs.resize(i + 1, 0.0);
            }
            probs[i] += p;
        }
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::NonStochastic { context: context.to_string(), sum });
        }
        if probs[0] > 0.0 {
            return Err(Error::ZeroOffspringMass { context: context.to_string(), mass: probs[0] });
        }
        let mean: f64 = probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        let second_moment: f64 = probs.iter().enumerate().map(|(i, p)| (i * i) as f64 * p).sum();
        Ok(Self { probs, mean, log_mean: mean.ln(), second_moment })
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs.get(i).copied().unwrap_or(0.0)
    }

    /// Dense probability vector indexed by offspring count; entry 0 is 0.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Nonzero `(count, probability)` pairs in increasing count order.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs.iter().copied().enumerate().filter(|&(_, p)| p > 0.0)
    }

    pub fn max_support(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn p1(&self) -> f64 {
        self.prob(1)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn log_mean(&self) -> f64 {
        self.log_mean
    }

    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// `Σ i^p P(N = i)`.
    pub fn moment(&self, p: f64) -> f64 {
        self.support().map(|(i, q)| (i as f64).powf(p) * q).sum()
    }

    /// Generating function `f(t) = Σ p_i t^i` on `[0, 1]`.
    pub fn pgf(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("pgf argument {t} outside [0, 1]")));
        }
        Ok(self.pgf_unchecked(t))
    }

    pub(crate) fn pgf_unchecked(&self, t: f64) -> f64 {
        self.probs.iter().rev().fold(0.0, |acc, &p| acc * t + p)
    }

    /// `1 - f(1 - u)` for small `u`, computed without cancellation as
    /// `u Σ_i p_i Σ_{l<i} (1-u)^l`.
    pub(crate) fn pgf_complement(&self, u: f64) -> f64 {
        let v = 1.0 - u;
        let mut geometric = 0.0;
        let mut power = 1.0;
        let mut acc = 0.0;
        for &p in self.probs.iter().skip(1) {
            geometric += power;
            power *= v;
            acc += p * geometric;
        }
        u * acc
    }
}

/// A finite random environment: states with weights and offspring laws.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentModel {
    label: String,
    weights: Vec<f64>,
    laws: Vec<OffspringLaw>,
    mu: f64,
    support_limit: usize,
}

impl EnvironmentModel {
    pub fn new(label: impl Into<String>, states: Vec<(f64, OffspringLaw)>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyModel);
        }
        let mut weights = Vec::with_capacity(states.len());
        let mut laws = Vec::with_capacity(states.len());
        for (i, (w, law)) in states.into_iter().enumerate() {
            if !w.is_finite() || w <= 0.0 || w > 1.0 {
                return Err(Error::InvalidProbability { context: format!("weight of state {i}"), value: w });
            }
            weights.push(w);
            laws.push(law);
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::NonStochastic { context: "environment weights".into(), sum });
        }
        let mu: f64 = weights.iter().zip(&laws).map(|(w, l)| w * l.log_mean()).sum();
        if mu <= 0.0 {
            return Err(Error::Subcritical { mu });
        }
        let support_limit = laws.iter().map(OffspringLaw::max_support).max().unwrap_or(1);
        Ok(Self { label: label.into(), weights, laws, mu, support_limit })
    }

    /// Builds a model from `(weight, pmf)` pairs.
    pub fn from_pmfs(
        label: impl Into<String>,
        spec: &[(f64, Vec<(usize, f64)>)],
        support_limit: usize,
    ) -> Result<Self> {
        let states = spec
            .iter()
            .enumerate()
            .map(|(i, (w, pmf))| {
                OffspringLaw::with_context(pmf.iter().copied(), support_limit, &format!("state {i}"))
                    .map(|law| (*w, law))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(label, states)
    }

    /// Geometric laws `p_k = (1-b) b^{k-1}` truncated at the smallest `K`
    /// with tail mass `b^K < tail_epsilon`, then renormalized.
    pub fn geometric(b_values: &[(f64, f64)], tail_epsilon: f64, support_limit: usize) -> Result<Self> {
        if !(tail_epsilon > 0.0 && tail_epsilon < 1.0) {
            return Err(Error::Domain(format!("tail_epsilon {tail_epsilon} outside (0, 1)")));
        }
        let mut states = Vec::with_capacity(b_values.len());
        let mut cuts = Vec::with_capacity(b_values.len());
        for (i, &(w, b)) in b_values.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Domain(format!("geometric parameter b = {b} outside (0, 1)")));
            }
            let mut k = 1usize;
            while b.powi(k as i32) >= tail_epsilon {
                k += 1;
                if k > support_limit {
                    return Err(Error::SupportTooLarge { support: k, limit: support_limit });
                }
            }
            let kept = 1.0 - b.powi(k as i32);
            let pmf = (1..=k).map(|j| (j, (1.0 - b) * b.powi(j as i32 - 1) / kept));
            states.push((w, OffspringLaw::with_context(pmf, support_limit, &format!("state {i}"))?));
            cuts.push(k);
        }
        let bs: Vec<String> = b_values.iter().map(|(_, b)| b.to_string()).collect();
        let ks: Vec<String> = cuts.iter().map(usize::to_string).collect();
        let label = format!(
            "geometric(b=[{}], tail<{tail_epsilon:e}, K=[{}])",
            bs.join(","),
            ks.join(",")
        );
        Self::new(label, states)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn laws(&self) -> &[OffspringLaw] {
        &self.laws
    }

    pub fn weight(&self, s: usize) -> f64 {
        self.weights[s]
    }

    pub fn law(&self, s: usize) -> &OffspringLaw {
        &self.laws[s]
    }

    /// `(weight, law)` pairs.
    pub fn states(&self) -> impl Iterator<Item = (f64, &OffspringLaw)> + '_ {
        self.weights.iter().copied().zip(&self.laws)
    }

    /// `μ = E[log m_0]`.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn max_support(&self) -> usize {
        self.support_limit
    }

    pub fn min_log_mean(&self) -> f64 {
        self.laws.iter().map(OffspringLaw::log_mean).fold(f64::INFINITY, f64::min)
    }

    pub fn max_log_mean(&self) -> f64 {
        self.laws.iter().map(OffspringLaw::log_mean).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Environment law tilted by `m^λ`.
    pub fn tilted(&self, lambda: f64) -> TiltedEnv {
        let logs: Vec<f64> = self
            .states()
            .map(|(w, l)| w.ln() + lambda * l.log_mean())
            .collect();
        let log_normalizer = log_sum_exp(logs.iter().copied());
        let probs: Vec<f64> = logs.iter().map(|x| (x - log_normalizer).exp()).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        TiltedEnv { lambda, probs, cumulative, log_normalizer }
    }

    /// Draws one state from the `λ`-tilted law; also returns `E[m_0^λ]`.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R, lambda: f64) -> (usize, f64) {
        let tilt = self.tilted(lambda);
        (tilt.sample(rng), tilt.normalizer())
    }
}

/// Environment law reweighted by `m^λ / E[m^λ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedEnv {
    lambda: f64,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    log_normalizer: f64,
}

impl TiltedEnv {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `Λ(λ) = log E[m_0^λ]`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn normalizer(&self) -> f64 {
        self.log_normalizer.exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.probs.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
        self.cumulative.partition_point(|&c| c <= u).min(self.probs.len() - 1)
    }
}

/// A finite stretch `ξ_0, …, ξ_{n-1}` of the environment with the running
/// sums `S_j = log Π_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvPath {
    states: Vec<usize>,
    steps: Vec<f64>,
    log_pi: Vec<f64>,
}

impl EnvPath {
    pub fn new(model: &EnvironmentModel, states: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = states.iter().find(|&&s| s >= model.len()) {
            return Err(Error::Domain(format!("state index {bad} out of range")));
        }
        let mut path = Self::empty();
        for s in states {
            path.push(model, s);
        }
        Ok(path)
    }

    pub fn empty() -> Self {
        Self { states: Vec::new(), steps: Vec::new(), log_pi: vec![0.0] }
    }

    /// i.i.d. draws from a (possibly tilted) environment law.
    pub fn sample<R: Rng + ?Sized>(model: &EnvironmentModel, tilt: &TiltedEnv, n: usize, rng: &mut R) -> Self {
        let mut path = Self::empty();
        path.extend_sampled(model, tilt, n, rng);
        path
    }

    pub fn extend_sampled<R: Rng + ?Sized>(
        &mut self,
        model: &EnvironmentModel,
        tilt: &TiltedEnv,
        extra: usize,
        rng: &mut R,
    ) {
        for _ in 0..extra {
            let s = tilt.sample(rng);
            self.push(model, s);
        }
    }

    pub fn push(&mut self, model: &EnvironmentModel, state: usize) {
        let x = model.law(state).log_mean();
        let last = self.log_pi[self.log_pi.len() - 1];
        self.states.push(state);
        self.steps.push(x);
        self.log_pi.push(last + x);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn state(&self, i: usize) -> usize {
        self.states[i]
    }

    /// `S_0 = 0, S_1, …, S_n`.
    pub fn log_pi(&self) -> &[f64] {
        &self.log_pi
    }

    pub fn s(&self, j: usize) -> f64 {
        self.log_pi[j]
    }

    /// The shifted path `T^m ξ = (ξ_m, ξ_{m+1}, …)`.
    pub fn shift(&self, m: usize) -> Self {
        let mut out = Self::empty();
        for (&s, &x) in self.states.iter().zip(&self.steps).skip(m) {
            let last = out.log_pi[out.log_pi.len() - 1];
            out.states.push(s);
            out.steps.push(x);
            out.log_pi.push(last + x);
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn gw_half() -> EnvironmentModel {
        EnvironmentModel::from_pmfs("GW-HALF", &[(1.0, vec![(1, 0.5), (2, 0.5)])], DEFAULT_SUPPORT_LIMIT).unwrap()
    }

    pub fn two_env() -> EnvironmentModel {
        EnvironmentModel::from_pmfs(
            "MODEL-2ENV",
            &[(0.5, vec![(1, 0.5), (2, 0.5)]), (0.5, vec![(1, 0.2), (2, 0.8)])],
            DEFAULT_SUPPORT_LIMIT,
        )
        .unwrap()
    }

    pub fn geo_half() -> EnvironmentModel {
        EnvironmentModel::geometric(&[(1.0, 0.5)], 1e-12, DEFAULT_SUPPORT_LIMIT).unwrap()
    }
}
