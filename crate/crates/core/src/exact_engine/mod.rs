//! Exact annealed transition kernel of `(Z_n)` truncated at a population
//! cap, with the probability mass beyond the cap tracked explicitly.

mod harmonic;

pub use harmonic::{harmonic_moments, harmonic_moments_with};

use serde::Serialize;

use crate::env_model::{EnvPath, EnvironmentModel};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Default population cap.
pub const DEFAULT_CAP: usize = 4096;

/// Rows handled by one work item during forward propagation.
const ROW_BLOCK: usize = 256;

#[derive(Debug, Clone)]
struct KernelRow {
    /// `p(i, i + d)` for `d = 0, 1, …` with `i + d ≤ cap`.
    probs: Vec<f64>,
    /// `Σ_{j > cap} p(i, j)`.
    overflow: f64,
    /// `Σ_{j > cap} j p(i, j)`.
    overflow_first_moment: f64,
    /// `Σ_{j > cap} j² p(i, j)`.
    overflow_second_moment: f64,
}

/// Annealed transition probabilities `p(i, j) = P_i(Z_1 = j)` for
/// `1 ≤ i, j ≤ cap`.
#[derive(Debug, Clone)]
pub struct TruncatedKernel {
    model: EnvironmentModel,
    cap: usize,
    max_offspring: usize,
    rows: Vec<KernelRow>,
}

impl TruncatedKernel {
    pub fn new(model: &EnvironmentModel, cap: usize) -> Result<Self> {
        Self::new_with(model, cap, Exec::default())
    }

    pub fn new_with(model: &EnvironmentModel, cap: usize, exec: Exec) -> Result<Self> {
        let max_offspring = model.max_support();
        if cap < max_offspring.max(1) {
            return Err(Error::CapTooSmall { cap, required: max_offspring.max(1) });
        }
        let per_state = exec.map(model.len(), |s| state_rows(model.law(s).probs(), cap));
        let rows = exec.map(cap, |idx| {
            let len = per_state.iter().map(|rows| rows[idx].probs.len()).max().unwrap_or(0);
            let mut row = KernelRow {
                probs: vec![0.0; len],
                overflow: 0.0,
                overflow_first_moment: 0.0,
                overflow_second_moment: 0.0,
            };
            for (s, rows) in per_state.iter().enumerate() {
                let w = model.weight(s);
                let src = &rows[idx];
                for (dst, p) in row.probs.iter_mut().zip(&src.probs) {
                    *dst += w * p;
                }
                row.overflow += w * src.overflow;
                row.overflow_first_moment += w * src.overflow_first_moment;
                row.overflow_second_moment += w * src.overflow_second_moment;
            }
            row
        });
        Ok(Self { model: model.clone(), cap, max_offspring, rows })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn model(&self) -> &EnvironmentModel {
        &self.model
    }

    pub fn max_offspring(&self) -> usize {
        self.max_offspring
    }

    /// `p(i, j)` for `1 ≤ i ≤ cap`; zero outside the stored band.
    pub fn p(&self, i: usize, j: usize) -> f64 {
        if i == 0 || i > self.cap || j < i {
            return 0.0;
        }
        self.rows[i - 1].probs.get(j - i).copied().unwrap_or(0.0)
    }

    /// Row `i` as `(first column, probabilities)`; the first column is `i`.
    pub fn row(&self, i: usize) -> (usize, &[f64]) {
        (i, &self.rows[i - 1].probs)
    }

    pub fn overflow(&self, i: usize) -> f64 {
        self.rows[i - 1].overflow
    }

    pub(crate) fn overflow_first_moment(&self, i: usize) -> f64 {
        self.rows[i - 1].overflow_first_moment
    }

    pub(crate) fn overflow_second_moment(&self, i: usize) -> f64 {
        self.rows[i - 1].overflow_second_moment
    }

    /// Nonzero entries `(i, j, p)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows.iter().enumerate().flat_map(|(idx, row)| {
            let i = idx + 1;
            row.probs
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(move |(d, &p)| (i, i + d, p))
        })
    }
}

/// Incremental `i`-fold convolutions of one offspring law, `i = 1..=cap`.
fn state_rows(pmf: &[f64], cap: usize) -> Vec<KernelRow> {
    let max_t = pmf.len() - 1;
    let min_t = pmf.iter().position(|&p| p > 0.0).unwrap_or(1);
    let mut conv = vec![0.0; cap + 1];
    conv[0] = 1.0;
    let mut overflow = 0.0;
    let mut overflow_m1 = 0.0;
    let mut overflow_m2 = 0.0;
    let mean: f64 = pmf.iter().enumerate().map(|(t, p)| t as f64 * p).sum();
    let second: f64 = pmf.iter().enumerate().map(|(t, p)| (t * t) as f64 * p).sum();
    let mut rows = Vec::with_capacity(cap);
    for i in 1..=cap {
        let old_lo = (i - 1) * min_t;
        let old_hi = ((i - 1) * max_t).min(cap);
        // Mass that leaves the window when one more individual reproduces.
        let mut cross = 0.0;
        let mut cross_m1 = 0.0;
        let mut cross_m2 = 0.0;
        if old_lo <= cap {
            let from = old_lo.max((cap + 1).saturating_sub(max_t));
            for (j, &c) in conv.iter().enumerate().take(old_hi + 1).skip(from) {
                if c == 0.0 {
                    continue;
                }
                for (t, &p) in pmf.iter().enumerate().skip(cap + 1 - j) {
                    cross += c * p;
                    let size = (j + t) as f64;
                    cross_m1 += c * p * size;
                    cross_m2 += c * p * size * size;
                }
            }
        }
        overflow_m2 += 2.0 * mean * overflow_m1 + second * overflow + cross_m2;
        overflow_m1 += overflow * mean + cross_m1;
        overflow += cross;
        let new_lo = i * min_t;
        let new_hi = (i * max_t).min(cap);
        if old_lo <= cap {
            for j in (old_lo..=new_hi).rev() {
                let mut acc = 0.0;
                for (t, &p) in pmf.iter().enumerate().skip(1) {
                    if t > j {
                        break;
                    }
                    let src = j - t;
                    if src < old_lo {
                        break;
                    }
                    if src <= old_hi {
                        acc += conv[src] * p;
                    }
                }
                conv[j] = acc;
            }
        }
        let probs = if i <= cap && new_lo <= cap {
            let start = i;
            let end = new_hi.max(start);
            conv[start..=end].to_vec()
        } else {
            Vec::new()
        };
        debug_assert!(conv[..i].iter().all(|&c| c == 0.0));
        rows.push(KernelRow {
            probs,
            overflow,
            overflow_first_moment: overflow_m1,
            overflow_second_moment: overflow_m2,
        });
    }
    rows
}

/// Law of `Z_n` under `P_k`, exact for `j ≤ cap`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmfVector {
    pub k: usize,
    pub n: usize,
    /// `values[j] = P_k(Z_n = j)` for `0 ≤ j ≤ cap`.
    pub values: Vec<f64>,
    /// `P_k(Z_n > cap)`.
    pub overflow: f64,
}

impl PmfVector {
    pub fn point_mass(k: usize, cap: usize) -> Self {
        let mut values = vec![0.0; cap + 1];
        values[k] = 1.0;
        Self { k, n: 0, values, overflow: 0.0 }
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.values.get(j).copied().unwrap_or(0.0)
    }

    /// `P_k(Z_n ≤ x)` for `x ≤ cap`.
    pub fn cdf(&self, x: usize) -> f64 {
        assert!(x < self.values.len(), "cdf beyond cap");
        self.values[..=x].iter().sum()
    }
}

/// One generation of forward propagation.
pub fn step_distribution(kernel: &TruncatedKernel, pmf: &PmfVector, exec: Exec) -> PmfVector {
    let cap = kernel.cap;
    let blocks = cap.div_ceil(ROW_BLOCK);
    let partials = exec.map(blocks, |b| {
        let lo = b * ROW_BLOCK + 1;
        let hi = ((b + 1) * ROW_BLOCK).min(cap);
        let span_hi = (hi * kernel.max_offspring).min(cap);
        let mut part = vec![0.0; span_hi + 1 - lo];
        let mut over = 0.0;
        let mut any = false;
        for i in lo..=hi {
            let v = pmf.values[i];
            if v == 0.0 {
                continue;
            }
            any = true;
            let row = &kernel.rows[i - 1];
            for (d, &p) in row.probs.iter().enumerate() {
                part[i - lo + d] += v * p;
            }
            over += v * row.overflow;
        }
        (lo, any.then_some(part), over)
    });
    let mut values = vec![0.0; cap + 1];
    let mut overflow = pmf.overflow;
    for (lo, part, over) in partials {
        if let Some(part) = part {
            for (d, p) in part.into_iter().enumerate() {
                values[lo + d] += p;
            }
        }
        overflow += over;
    }
    PmfVector { k: pmf.k, n: pmf.n + 1, values, overflow }
}

/// Distributions of `Z_0, …, Z_n` under `P_k`.
pub fn distribution_sequence(kernel: &TruncatedKernel, k: usize, n: usize, exec: Exec) -> Result<Vec<PmfVector>> {
    if k == 0 || k > kernel.cap {
        return Err(Error::Domain(format!("initial size {k} outside [1, {}]", kernel.cap)));
    }
    let mut out = Vec::with_capacity(n + 1);
    out.push(PmfVector::point_mass(k, kernel.cap));
    for _ in 0..n {
        let next = step_distribution(kernel, out.last().expect("non-empty"), exec);
        out.push(next);
    }
    Ok(out)
}

/// Distribution of `Z_n` under `P_k`.
pub fn distribution_of_zn(kernel: &TruncatedKernel, k: usize, n: usize) -> Result<PmfVector> {
    distribution_of_zn_with(kernel, k, n, Exec::default())
}

pub fn distribution_of_zn_with(kernel: &TruncatedKernel, k: usize, n: usize, exec: Exec) -> Result<PmfVector> {
    if k == 0 || k > kernel.cap {
        return Err(Error::Domain(format!("initial size {k} outside [1, {}]", kernel.cap)));
    }
    let mut pmf = PmfVector::point_mass(k, kernel.cap);
    for _ in 0..n {
        pmf = step_distribution(kernel, &pmf, exec);
    }
    Ok(pmf)
}

/// Closed interval reported by the exact engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn point(x: f64) -> Self {
        Self { lower: x, upper: x }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { lower: self.lower * c, upper: self.upper * c }
    }
}

/// Bracket for `E_k[Z_n^{-r}]` from the truncated law: the overflow mass is
/// charged at `cap^{-r}`.
pub fn harmonic_interval(pmf: &PmfVector, r: f64) -> Interval {
    let cap = pmf.values.len() - 1;
    let lower: f64 = pmf
        .values
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, p)| **p > 0.0)
        .map(|(j, p)| (j as f64).powf(-r) * p)
        .sum();
    Interval { lower, upper: lower + pmf.overflow * (cap as f64).powf(-r) }
}

pub fn exact_harmonic_moment(kernel: &TruncatedKernel, k: usize, n: usize, r: f64) -> Result<Interval> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("harmonic exponent r = {r} must be non-negative")));
    }
    let pmf = distribution_of_zn(kernel, k, n)?;
    Ok(harmonic_interval(&pmf, r))
}

/// `g_n(t) = f_{ξ_0} ∘ … ∘ f_{ξ_{n-1}}(t)`.
pub fn quenched_pgf(path: &EnvPath, model: &EnvironmentModel, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("pgf argument {t} outside [0, 1]")));
    }
    Ok(path
        .states()
        .iter()
        .rev()
        .fold(t, |acc, &s| model.law(s).pgf_unchecked(acc)))
}

/// Truncated annealed generating function `Σ_{j ≤ cap} t^j P_k(Z_n = j)`
/// together with the bound `t^{cap+1} · overflow` on the missing part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnnealedPgf {
    pub value: f64,
    pub overflow_bound: f64,
}

pub fn annealed_pgf(kernel: &TruncatedKernel, k: usize, n: usize, t: f64) -> Result<AnnealedPgf> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("annealed pgf argument {t} outside [0, 1)")));
    }
    let pmf = distribution_of_zn(kernel, k, n)?;
    Ok(annealed_pgf_of(&pmf, t))
}

pub(crate) fn annealed_pgf_of(pmf: &PmfVector, t: f64) -> AnnealedPgf {
    let cap = pmf.values.len() - 1;
    let value = pmf.values.iter().rev().fold(0.0, |acc, &p| acc * t + p);
    AnnealedPgf { value, overflow_bound: pmf.overflow * t.powi(cap as i32 + 1) }
}
