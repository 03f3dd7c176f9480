//! Trajectory simulation and Monte Carlo estimators with per-replicate
//! random substreams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::Serialize;

use crate::env_model::{EnvPath, EnvironmentModel, OffspringLaw, TiltedEnv};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numeric::{ExactSum, ExtReal};
use crate::rate_fn::{critical_constants, deviation_threshold, legendre, solve_r_k};
use crate::small_value::gamma_k;

/// Populations are capped here and the trajectory flagged.
pub const POPULATION_CAP: u64 = 1 << 62;

/// Replicates per work item.
const BATCH: u64 = 2048;

/// Below this many parents offspring are drawn one by one.
const DIRECT_DRAW_LIMIT: u64 = 16;

/// Random stream `index` derived from `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Replication controls shared by all estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McParams {
    pub replicates: u64,
    pub seed: u64,
    pub exec: Exec,
}

impl McParams {
    pub fn new(replicates: u64, seed: u64) -> Self {
        Self { replicates, seed, exec: Exec::default() }
    }

    pub fn with_exec(self, exec: Exec) -> Self {
        Self { exec, ..self }
    }
}

/// Mergeable sufficient statistics of a sample.
#[derive(Debug, Clone, Default)]
pub struct McAccumulator {
    count: u64,
    hits: u64,
    sum: ExactSum,
    sum_sq: ExactSum,
    min: f64,
    max: f64,
}

impl McAccumulator {
    pub fn new() -> Self {
        Self { min: f64::INFINITY, max: f64::NEG_INFINITY, ..Self::default() }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        if x != 0.0 {
            self.hits += 1;
        }
        self.sum.add(x);
        let sq = x * x;
        self.sum_sq.add(sq);
        self.sum_sq.add(x.mul_add(x, -sq));
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    pub fn merge(&mut self, other: &McAccumulator) {
        self.count += other.count;
        self.hits += other.hits;
        self.sum.merge(&other.sum);
        self.sum_sq.merge(&other.sum_sq);
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Number of nonzero values pushed.
    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.sum.value() / self.count as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 || self.min == self.max {
            return 0.0;
        }
        let n = self.count as f64;
        let s = self.sum.value();
        let mut centered = self.sum_sq.clone();
        let sq = s * s / n;
        centered.add(-sq);
        (centered.value() / (n - 1.0)).max(0.0)
    }

    pub fn finish(&self, tilt: f64, seed: u64) -> McEstimate {
        let stderr = if self.count > 0 { (self.variance() / self.count as f64).sqrt() } else { f64::NAN };
        McEstimate {
            mean: self.mean(),
            stderr,
            replicates: self.count,
            tilt,
            seed,
            hits: self.hits,
        }
    }
}

/// A Monte Carlo estimate with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub replicates: u64,
    pub tilt: f64,
    pub seed: u64,
    /// Replicates with a nonzero contribution.
    pub hits: u64,
}

impl McEstimate {
    /// No replicate hit the event, so the standard error says nothing.
    pub fn is_degenerate(&self) -> bool {
        self.hits == 0
    }
}

/// Runs `f` on replicates `0..replicates`, each with its own substream, and
/// accumulates the returned values.
pub fn run_replicates<F>(params: McParams, stream_offset: u64, f: F) -> McAccumulator
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync + Send,
{
    let batches = params.replicates.div_ceil(BATCH) as usize;
    let parts = params.exec.map(batches, |b| {
        let mut acc = McAccumulator::new();
        let start = b as u64 * BATCH;
        let end = (start + BATCH).min(params.replicates);
        for i in start..end {
            let mut rng = substream(params.seed, stream_offset + i);
            acc.push(f(&mut rng));
        }
        acc
    });
    let mut total = McAccumulator::new();
    for part in &parts {
        total.merge(part);
    }
    total
}

/// Like [`run_replicates`] for `width` statistics per replicate, written by
/// `f` into the provided slice.
pub fn run_replicates_multi<F>(params: McParams, stream_offset: u64, width: usize, f: F) -> Vec<McAccumulator>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync + Send,
{
    let batches = params.replicates.div_ceil(BATCH) as usize;
    let parts = params.exec.map(batches, |b| {
        let mut accs = vec![McAccumulator::new(); width];
        let mut buf = vec![0.0; width];
        let start = b as u64 * BATCH;
        let end = (start + BATCH).min(params.replicates);
        for i in start..end {
            let mut rng = substream(params.seed, stream_offset + i);
            f(&mut rng, &mut buf);
            for (acc, &x) in accs.iter_mut().zip(&buf) {
                acc.push(x);
            }
        }
        accs
    });
    let mut total = vec![McAccumulator::new(); width];
    for part in &parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    total
}

/// One simulated trajectory `Z_0, …, Z_n` with its environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub path: EnvPath,
    pub z: Vec<u64>,
    /// Set when the population hit [`POPULATION_CAP`].
    pub overflowed: bool,
}

impl Trajectory {
    /// `W_n = Z_n / Π_n`.
    pub fn w(&self) -> f64 {
        let n = self.z.len() - 1;
        ((self.z[n] as f64).ln() - self.path.s(n)).exp()
    }

    pub fn last(&self) -> u64 {
        self.z[self.z.len() - 1]
    }
}

/// Total offspring of `parents` individuals with law `law`. Returns `None`
/// past [`POPULATION_CAP`].
pub fn offspring_sum<R: Rng + ?Sized>(law: &OffspringLaw, parents: u64, rng: &mut R) -> Option<u64> {
    let probs = law.probs();
    let mut total: u64 = 0;
    if parents <= DIRECT_DRAW_LIMIT {
        for _ in 0..parents {
            let mut u: f64 = rng.random();
            let mut child = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate().skip(1) {
                if u < p {
                    child = i;
                    break;
                }
                u -= p;
            }
            if probs[child] == 0.0 {
                child = law.support().last().map(|(i, _)| i).unwrap_or(1);
            }
            total += child as u64;
        }
        return Some(total);
    }
    let support: Vec<(usize, f64)> = law.support().collect();
    let mut remaining = parents;
    let mut mass_left = 1.0;
    for (idx, &(i, p)) in support.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let count = if idx + 1 == support.len() {
            remaining
        } else {
            let q = (p / mass_left).clamp(0.0, 1.0);
            Binomial::new(remaining, q).expect("valid binomial").sample(rng)
        };
        total = total.checked_add((i as u64).checked_mul(count)?)?;
        remaining -= count;
        mass_left -= p;
    }
    (total <= POPULATION_CAP).then_some(total)
}

/// Simulates `n` generations from `k` ancestors with environments drawn
/// from `tilt` and offspring drawn from the untilted laws.
pub fn simulate<R: Rng + ?Sized>(
    model: &EnvironmentModel,
    k: u64,
    n: usize,
    rng: &mut R,
    tilt: &TiltedEnv,
) -> Trajectory {
    let path = EnvPath::sample(model, tilt, n, rng);
    let mut z = Vec::with_capacity(n + 1);
    z.push(k);
    let mut overflowed = false;
    for j in 0..n {
        let current = z[j];
        let next = if overflowed {
            POPULATION_CAP
        } else {
            match offspring_sum(model.law(path.state(j)), current, rng) {
                Some(x) => x,
                None => {
                    overflowed = true;
                    POPULATION_CAP
                }
            }
        };
        z.push(next);
    }
    Trajectory { path, z, overflowed }
}

/// Direct estimate of `E_k[Z_n^{-r}]`.
pub fn estimate_harmonic(model: &EnvironmentModel, k: u64, n: usize, r: f64, params: McParams) -> Result<McEstimate> {
    if !(r > 0.0) || k == 0 {
        return Err(Error::Domain(format!("need r > 0 and k ≥ 1, got r = {r}, k = {k}")));
    }
    let tilt = model.tilted(0.0);
    let acc = run_replicates(params, 0, |rng| {
        let t = simulate(model, k, n, rng, &tilt);
        (t.last() as f64).powf(-r)
    });
    Ok(acc.finish(0.0, params.seed))
}

/// Default environment tilt for `P_k(Z_n ≤ e^{θn})`: `-r_k` below `θ_k`,
/// `λ_θ` above, clipped to `[-r_k, 0]`.
pub fn default_tilt(model: &EnvironmentModel, k: usize, theta: f64) -> Result<f64> {
    let c = critical_constants(model, k);
    let r_k = c.r_k.finite().ok_or(Error::InfiniteCritical)?;
    if theta < c.theta_k {
        return Ok(-r_k);
    }
    let l = legendre(model, theta)?;
    Ok(l.lambda.clamp(-r_k, 0.0))
}

/// Importance-sampling estimate of `P_k(Z_n ≤ e^{θn})` with environments
/// tilted by `m^λ` and weight `exp(-λ S_n + n Λ(λ))`.
pub fn estimate_lower_deviation(
    model: &EnvironmentModel,
    k: u64,
    n: usize,
    theta: f64,
    lambda: f64,
    params: McParams,
) -> Result<McEstimate> {
    let mu = model.mu();
    if !(theta > 0.0 && theta < mu) {
        return Err(Error::Domain(format!("theta = {theta} outside (0, mu = {mu})")));
    }
    if !(lambda <= 0.0) {
        return Err(Error::Domain(format!("tilt {lambda} must be ≤ 0")));
    }
    let x = deviation_threshold(theta, n);
    if n == 0 {
        let hit = if k <= x { 1.0 } else { 0.0 };
        let mut acc = McAccumulator::new();
        for _ in 0..params.replicates.max(1) {
            acc.push(hit);
        }
        let mut est = acc.finish(lambda, params.seed);
        est.replicates = params.replicates;
        return Ok(est);
    }
    let tilt = model.tilted(lambda);
    let acc = run_replicates(params, 0, |rng| tilted_indicator(model, &tilt, k, n, x, rng));
    Ok(acc.finish(lambda, params.seed))
}

/// `1{Z_n ≤ x} exp(-λ S_n + n Λ(λ))` for one trajectory; the population is
/// no longer simulated once it exceeds `x`.
fn tilted_indicator<R: Rng + ?Sized>(
    model: &EnvironmentModel,
    tilt: &TiltedEnv,
    start: u64,
    n: usize,
    x: u64,
    rng: &mut R,
) -> f64 {
    let mut z = start;
    let mut s = 0.0;
    let mut alive = z <= x;
    for _ in 0..n {
        let state = tilt.sample(rng);
        let law = model.law(state);
        s += law.log_mean();
        if alive {
            match offspring_sum(law, z, rng) {
                Some(next) if next <= x => z = next,
                _ => alive = false,
            }
        }
    }
    if !alive {
        return 0.0;
    }
    (-tilt.lambda() * s + n as f64 * tilt.log_normalizer()).exp()
}

/// Empirical rate `-(1/n) log P̂_k(Z_n ≤ e^{θn})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub n: usize,
    pub probability: McEstimate,
    pub rate: f64,
    /// Delta-method standard error of the rate.
    pub rate_stderr: f64,
}

/// Empirical lower-deviation rates for each `n` in `ns`.
///
/// Splits on the first generation `τ` at which the population leaves `k`:
/// `P_k(Z_n ≤ x) = γ_k^n 1{k ≤ x} + Σ_{τ<n} γ_k^τ (1-γ_k) E[P_Y(Z_{n-τ-1} ≤ x)]`
/// with `Y` distributed as `Z_1` given `Z_1 ≠ k`. Each stratum gets an equal
/// share of the replicates and its residual probability is estimated by
/// environment tilting at the rate matching `log(x/Y)/(n-τ-1)`.
pub fn rate_estimate(
    model: &EnvironmentModel,
    k: usize,
    theta: f64,
    ns: &[usize],
    params: McParams,
) -> Result<Vec<RateEstimate>> {
    let mu = model.mu();
    if !(theta > 0.0 && theta < mu) {
        return Err(Error::Domain(format!("theta = {theta} outside (0, mu = {mu})")));
    }
    ns.iter()
        .enumerate()
        .map(|(slot, &n)| {
            let est = departure_estimate(model, k, n, theta, params, slot as u64)?;
            if !(est.mean > 0.0) {
                return Err(Error::HypothesisViolated(format!(
                    "no replicate reached {{Z_{n} ≤ e^({theta}·{n})}}"
                )));
            }
            Ok(RateEstimate {
                n,
                probability: est,
                rate: -est.mean.ln() / n as f64,
                rate_stderr: est.stderr / (est.mean * n as f64),
            })
        })
        .collect()
}

/// Stratified estimate of `P_k(Z_n ≤ e^{θn})` over the first departure
/// time from `k`.
pub fn departure_estimate(
    model: &EnvironmentModel,
    k: usize,
    n: usize,
    theta: f64,
    params: McParams,
    stream_slot: u64,
) -> Result<McEstimate> {
    let x = deviation_threshold(theta, n);
    let gamma = gamma_k(model, k);
    let stay = if (k as u64) <= x { gamma.powi(n as i32) } else { 0.0 };
    if n == 0 {
        return Ok(McEstimate { mean: stay, stderr: 0.0, replicates: 0, tilt: 0.0, seed: params.seed, hits: 0 });
    }
    if gamma >= 1.0 {
        return Err(Error::HypothesisViolated("population never leaves its initial size".into()));
    }
    let per = params.replicates / n as u64;
    let extra = params.replicates % n as u64;
    let untilted = model.tilted(0.0);
    let r_cache: Vec<f64> = (0..=65)
        .map(|j| match solve_r_k(model, j.max(1)) {
            ExtReal::Finite(r) => r,
            ExtReal::PosInfinity => f64::INFINITY,
        })
        .collect();
    let mut mean = ExactSum::new();
    mean.add(stay);
    let mut var = 0.0;
    let mut hits = 0;
    let mut total = 0;
    for tau in 0..n {
        let count = per + u64::from((tau as u64) < extra);
        if count == 0 {
            continue;
        }
        let weight = gamma.powi(tau as i32) * (1.0 - gamma);
        let remaining = n - tau - 1;
        let stratum = McParams { replicates: count, ..params };
        let offset = (stream_slot << 48) | ((tau as u64) << 32);
        let acc = run_replicates(stratum, offset, |rng| {
            let y = loop {
                let state = untilted.sample(rng);
                let next = offspring_sum(model.law(state), k as u64, rng).unwrap_or(POPULATION_CAP);
                if next != k as u64 {
                    break next;
                }
            };
            if y > x {
                return 0.0;
            }
            if remaining == 0 {
                return 1.0;
            }
            let target = ((x as f64).ln() - (y as f64).ln()) / remaining as f64;
            let r_y = r_cache.get(y as usize).copied().unwrap_or(r_cache[65]);
            let lambda = residual_tilt(model, target, r_y);
            let tilt = model.tilted(lambda);
            tilted_indicator(model, &tilt, y, remaining, x, rng)
        });
        let est = acc.finish(0.0, params.seed);
        mean.add(weight * est.mean);
        var += weight * weight * est.stderr * est.stderr;
        hits += est.hits;
        total += count;
    }
    Ok(McEstimate {
        mean: mean.value(),
        stderr: var.sqrt(),
        replicates: total,
        tilt: f64::NAN,
        seed: params.seed,
        hits,
    })
}

fn residual_tilt(model: &EnvironmentModel, target: f64, r_limit: f64) -> f64 {
    let floor = if r_limit.is_finite() { -r_limit } else { f64::NEG_INFINITY };
    if target >= model.mu() {
        return 0.0;
    }
    if target <= model.min_log_mean() {
        return floor.max(-64.0);
    }
    match legendre(model, target) {
        Ok(l) => l.lambda.clamp(floor.max(-64.0), 0.0),
        Err(_) => 0.0,
    }
}
