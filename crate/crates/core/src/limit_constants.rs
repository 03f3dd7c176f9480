//! Limit constants `C(k, r)` of the harmonic moments in the three regimes,
//! quenched Laplace transforms of `W` and the integral identity at `r = r_k`.
//!
//! The quenched transform is `φ_ξ(t) ≈ E_ξ[e^{-t W_n}] = g_n(e^{-t/Π_n})`
//! with `g_n = f_0 ∘ ⋯ ∘ f_{n-1}`. Near 1 the composition runs on `1 - u`.

use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::gamma;

use crate::env_model::{EnvPath, EnvironmentModel, TiltedEnv};
use crate::error::{Error, Result};
use crate::monte_carlo::{run_replicates_multi, McAccumulator, McParams};
use crate::numeric::{gauss_legendre, ExtReal, LogGrid};
use crate::rate_fn::{c_r, solve_r_k};
use crate::small_value::{gamma_k, q_eval_unchecked, QTable};

/// Default depth of the quenched Laplace approximation.
pub const DEFAULT_DEPTH: usize = 40;

/// Most extra generations the adaptive depth may add.
pub const MAX_EXTRA_DEPTH: usize = 600;

/// Relative distance under which `r` counts as `r_k`.
pub const CRITICAL_TOLERANCE: f64 = 1e-9;

const IDENTITY_NODES: usize = 24;

/// Generations removed for the depth-error probe. The approximation error
/// shrinks geometrically in the depth, so the change over this many
/// generations bounds the error left at full depth.
pub const DEPTH_PROBE: usize = 10;

/// Quadrature and depth controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplaceParams {
    pub depth: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub per_decade: usize,
    /// Deepen the composition for large `t` so that `t²/Π_n` stays at the
    /// level reached by `depth` at `t = 1`.
    pub adaptive: bool,
}

impl Default for LaplaceParams {
    fn default() -> Self {
        Self { depth: DEFAULT_DEPTH, t_min: 1e-8, t_max: 1e10, per_decade: 10, adaptive: true }
    }
}

/// `(φ, 1 - φ)` after composing `depth` generating functions of `path`.
fn compose(path: &EnvPath, model: &EnvironmentModel, t: f64, depth: usize) -> (f64, f64) {
    let x = t * (-path.s(depth)).exp();
    if x == 0.0 {
        return (1.0, 0.0);
    }
    let mut u = (-x).exp();
    let mut v = -(-x).exp_m1();
    for j in (0..depth).rev() {
        let law = model.law(path.state(j));
        if u <= 0.5 {
            u = law.pgf_unchecked(u);
            v = 1.0 - u;
        } else {
            v = law.pgf_complement(v);
            u = 1.0 - v;
        }
    }
    (u, v)
}

/// `g_n(exp(-t e^{-S_n}))` with `n = depth`.
pub fn quenched_laplace(path: &EnvPath, model: &EnvironmentModel, t: f64, depth: usize) -> Result<f64> {
    if path.len() < depth {
        return Err(Error::PathTooShort { needed: depth, len: path.len() });
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("Laplace argument t = {t} must be non-negative")));
    }
    Ok(compose(path, model, t, depth).0)
}

/// Depth for argument `t`: the first `n ≥ base` with
/// `S_n ≥ S_base + 2 log t`. `None` when the path is too short.
fn adaptive_depth(path: &EnvPath, base: usize, t: f64) -> Option<usize> {
    let target = path.s(base) + 2.0 * t.max(1.0).ln();
    (base..=path.len()).find(|&n| path.s(n) >= target)
}

/// The quenched transform on a log grid for one environment path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaplaceApprox {
    pub depth: usize,
    pub t: Vec<f64>,
    pub values: Vec<f64>,
    /// `1 - φ` at each grid point, accurate where `φ` is close to 1.
    pub complements: Vec<f64>,
    pub depths: Vec<usize>,
    /// Some grid point wanted more generations than the path had.
    pub depth_capped: bool,
}

/// Evaluates the quenched transform of `path` on the grid of `params`.
pub fn laplace_approx(path: &EnvPath, model: &EnvironmentModel, params: &LaplaceParams) -> Result<LaplaceApprox> {
    if path.len() < params.depth {
        return Err(Error::PathTooShort { needed: params.depth, len: path.len() });
    }
    let grid = LogGrid::new(params.t_min, params.t_max, params.per_decade);
    Ok(approx_on(path, model, &grid.t, params))
}

fn approx_on(path: &EnvPath, model: &EnvironmentModel, ts: &[f64], params: &LaplaceParams) -> LaplaceApprox {
    let mut values = Vec::with_capacity(ts.len());
    let mut complements = Vec::with_capacity(ts.len());
    let mut depths = Vec::with_capacity(ts.len());
    let mut capped = false;
    for &t in ts {
        let depth = if params.adaptive {
            adaptive_depth(path, params.depth, t).unwrap_or_else(|| {
                capped = true;
                path.len()
            })
        } else {
            params.depth
        };
        let (u, v) = compose(path, model, t, depth);
        values.push(u);
        complements.push(v);
        depths.push(depth);
    }
    LaplaceApprox { depth: params.depth, t: ts.to_vec(), values, complements, depths, depth_capped: capped }
}

/// Samples a path long enough for the adaptive depth at `t_max`.
fn sample_path<R: Rng + ?Sized>(
    model: &EnvironmentModel,
    tilt: &TiltedEnv,
    params: &LaplaceParams,
    rng: &mut R,
) -> EnvPath {
    let mut path = EnvPath::sample(model, tilt, params.depth, rng);
    if params.adaptive {
        let target = path.s(params.depth) + 2.0 * params.t_max.max(1.0).ln();
        while path.s(path.len()) < target && path.len() < params.depth + MAX_EXTRA_DEPTH {
            path.extend_sampled(model, tilt, 16, rng);
        }
    }
    path
}

/// `Ḡ_{k,1}(u) = E[f_0(u)^k] - γ_k u^k`, summed as
/// `Σ_s w_s (f_s - p_{1,s} u) Σ_l f_s^l (p_{1,s} u)^{k-1-l}`.
pub fn g_bar(model: &EnvironmentModel, k: usize, u: f64) -> f64 {
    model
        .states()
        .map(|(w, law)| {
            let probs = law.probs();
            let above = probs.iter().skip(2).rev().fold(0.0, |acc, &p| acc * u + p) * u * u;
            let b = law.p1() * u;
            let a = b + above;
            let mut geometric = 0.0;
            let mut a_pow = 1.0;
            for l in 0..k {
                geometric += a_pow * b.powi((k - 1 - l) as i32);
                a_pow *= a;
            }
            w * above * geometric
        })
        .sum()
}

/// Which normalization governs `E_k[Z_n^{-r}]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HarmonicRegime {
    Sub,
    Crit,
    Super,
}

impl HarmonicRegime {
    pub fn classify(r: f64, r_k: ExtReal) -> Self {
        match r_k {
            ExtReal::PosInfinity => HarmonicRegime::Sub,
            ExtReal::Finite(rk) if (r - rk).abs() <= CRITICAL_TOLERANCE * rk => HarmonicRegime::Crit,
            ExtReal::Finite(rk) if r < rk => HarmonicRegime::Sub,
            ExtReal::Finite(_) => HarmonicRegime::Super,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HarmonicRegime::Sub => "sub",
            HarmonicRegime::Crit => "crit",
            HarmonicRegime::Super => "super",
        }
    }
}

/// `log A_{k,n}(r)`: `n log γ_k` above `r_k`, `log n + n log γ_k` at `r_k`
/// and `n log c_r` below.
pub fn log_normalizer(model: &EnvironmentModel, k: usize, r: f64, n: usize) -> (HarmonicRegime, f64) {
    let regime = HarmonicRegime::classify(r, solve_r_k(model, k));
    let n_f = n as f64;
    let value = match regime {
        HarmonicRegime::Super => n_f * gamma_k(model, k).ln(),
        HarmonicRegime::Crit => n_f.ln() + n_f * gamma_k(model, k).ln(),
        HarmonicRegime::Sub => n_f * c_r(model, r).ln(),
    };
    (regime, value)
}

/// `A_{k,n}(r)`.
pub fn normalizer(model: &EnvironmentModel, k: usize, r: f64, n: usize) -> f64 {
    log_normalizer(model, k, r, n).1.exp()
}

/// An estimate of `C(k, r)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantEstimate {
    pub regime: HarmonicRegime,
    pub k: usize,
    pub r: f64,
    pub value: f64,
    /// Monte Carlo standard error; zero for the series form.
    pub stderr: f64,
    /// Difference between full- and half-resolution quadrature.
    pub quad_error: f64,
    /// Change in `value` when the composition depth drops by
    /// [`DEPTH_PROBE`].
    pub depth_error: f64,
    /// Power-law estimate of the omitted tail, not included in `value`.
    pub tail: f64,
    /// Integral form of the same constant, when computed.
    pub cross_check: Option<f64>,
    pub method: &'static str,
    pub paths: u64,
    /// Paths on which the adaptive depth hit its cap.
    pub depth_capped: u64,
}

/// Tail `∫_{T}^∞` of a log-grid integrand from the slope of its last two
/// points; infinite when the integrand is not decaying.
fn power_law_tail(g: &[f64], h: f64) -> f64 {
    let n = g.len();
    let (a, b) = (g[n - 2], g[n - 1]);
    if b == 0.0 {
        return 0.0;
    }
    let slope = (b / a).ln() / h;
    if slope < 0.0 { b / -slope } else { f64::INFINITY }
}

/// `Σ_{j ≤ J} q_{k,j} j^{-r}`, cross-checked against
/// `(1/Γ(r)) ∫ Q_k(e^{-t}) t^{r-1} dt` for the same truncated series.
pub fn constant_super(table: &QTable, model: &EnvironmentModel, r: f64) -> Result<ConstantEstimate> {
    let k = table.k;
    let r_k = solve_r_k(model, k);
    if HarmonicRegime::classify(r, r_k) != HarmonicRegime::Super {
        return Err(Error::RegimeMismatch { r, r_k: r_k.to_f64(), expected: "r > r_k" });
    }
    let value = table.harmonic_sum(r);
    let grid = LogGrid::new(1e-10, 1e3, 20);
    let g: Vec<f64> = grid.t.iter().map(|&t| t.powf(r) * q_eval_unchecked(table, (-t).exp()).value).collect();
    let (fine, coarse) = grid.trapezoid(&g);
    let lower = g[0] / r;
    let scale = 1.0 / gamma(r);
    Ok(ConstantEstimate {
        regime: HarmonicRegime::Super,
        k,
        r,
        value,
        stderr: 0.0,
        quad_error: scale * (fine - coarse).abs(),
        depth_error: 0.0,
        tail: series_tail(table, r),
        cross_check: Some(scale * (fine + lower)),
        method: "series",
        paths: 0,
        depth_capped: 0,
    })
}

/// `Σ_{j > J} q_{k,j} j^{-r}` for coefficients growing like the power law
/// fitted on `[J/2, J]`.
fn series_tail(table: &QTable, r: f64) -> f64 {
    let last = (table.k..=table.j_max).rev().find(|&j| table.q(j) > 0.0);
    let mid = last.and_then(|j| (table.k..=j / 2).rev().find(|&i| table.q(i) > 0.0));
    match (last, mid) {
        (Some(j), Some(i)) if i < j => {
            let s = (table.q(j) / table.q(i)).ln() / (j as f64 / i as f64).ln();
            let excess = r - s - 1.0;
            if excess > 0.0 {
                table.q(j) * (j as f64).powf(-r) * j as f64 / excess
            } else {
                f64::INFINITY
            }
        }
        _ => 0.0,
    }
}

struct PathIntegral {
    fine: f64,
    coarse: f64,
    /// `fine` at the probe depth.
    shallow: f64,
    tail: f64,
    capped: bool,
}

/// `∫_0^∞ F(φ_ξ(t), 1 - φ_ξ(t)) t^{r-1} dt` over one path, with the piece
/// below `t_min` taken from `φ ≈ 1`.
fn path_integral<F>(
    model: &EnvironmentModel,
    path: &EnvPath,
    grid: &LogGrid,
    params: &LaplaceParams,
    r: f64,
    at_one: f64,
    f: F,
) -> PathIntegral
where
    F: Fn(f64, f64) -> f64,
{
    let integrand = |approx: &LaplaceApprox| -> Vec<f64> {
        approx
            .t
            .iter()
            .zip(approx.values.iter().zip(&approx.complements))
            .map(|(&t, (&u, &v))| t.powf(r) * f(u, v))
            .collect()
    };
    let approx = approx_on(path, model, &grid.t, params);
    let g = integrand(&approx);
    let (fine, coarse) = grid.trapezoid(&g);
    let shallow = grid.trapezoid(&integrand(&approx_on(path, model, &grid.t, &probe(params)))).0;
    let lower = at_one * grid.t_min().powf(r) / r;
    PathIntegral {
        fine: fine + lower,
        coarse: coarse + lower,
        shallow: shallow + lower,
        tail: power_law_tail(&g, grid.h),
        capped: approx.depth_capped,
    }
}

fn probe(params: &LaplaceParams) -> LaplaceParams {
    LaplaceParams { depth: params.depth.saturating_sub(DEPTH_PROBE).max(1), ..*params }
}

fn check_params(params: &LaplaceParams) -> Result<LogGrid> {
    if params.depth == 0 || !(params.t_min > 0.0 && params.t_max > params.t_min) || params.per_decade == 0 {
        return Err(Error::Domain(format!("invalid Laplace parameters {params:?}")));
    }
    Ok(LogGrid::new(params.t_min, params.t_max, params.per_decade))
}

fn finish_estimate(
    accs: &[McAccumulator],
    scale: f64,
    regime: HarmonicRegime,
    k: usize,
    r: f64,
    method: &'static str,
) -> ConstantEstimate {
    let est = accs[0].finish(0.0, 0);
    ConstantEstimate {
        regime,
        k,
        r,
        value: scale * est.mean,
        stderr: scale * est.stderr,
        quad_error: scale * accs[1].mean().abs(),
        depth_error: scale * accs[4].mean().abs(),
        tail: scale * accs[2].mean(),
        cross_check: None,
        method,
        paths: est.replicates,
        depth_capped: accs[3].hits(),
    }
}

/// `C(k, r) = (1/Γ(r)) ∫ E^{(r)}[φ_ξ(t)^k] t^{r-1} dt` for `r < r_k`, over
/// environment paths tilted by `m^{-r}`.
pub fn constant_sub(
    model: &EnvironmentModel,
    k: usize,
    r: f64,
    laplace: &LaplaceParams,
    mc: McParams,
) -> Result<ConstantEstimate> {
    let r_k = solve_r_k(model, k);
    if !(r > 0.0) || HarmonicRegime::classify(r, r_k) != HarmonicRegime::Sub {
        return Err(Error::RegimeMismatch { r, r_k: r_k.to_f64(), expected: "0 < r < r_k" });
    }
    let grid = check_params(laplace)?;
    let tilt = model.tilted(-r);
    let kk = k as i32;
    let accs = run_replicates_multi(mc, 0, 5, |rng, out| {
        let path = sample_path(model, &tilt, laplace, rng);
        let p = path_integral(model, &path, &grid, laplace, r, 1.0, |u, _| u.powi(kk));
        out.copy_from_slice(&[p.fine, p.fine - p.coarse, p.tail, f64::from(u8::from(p.capped)), p.fine - p.shallow]);
    });
    Ok(finish_estimate(&accs, 1.0 / gamma(r), HarmonicRegime::Sub, k, r, "tilted-laplace"))
}

/// `C(k, r_k) = (γ_k^{-1}/Γ(r)) E^{(r)}[∫ Ḡ_{k,1}(φ_ξ(t)) t^{r-1} dt]`.
pub fn constant_crit(model: &EnvironmentModel, k: usize, laplace: &LaplaceParams, mc: McParams) -> Result<ConstantEstimate> {
    let r = solve_r_k(model, k).finite().ok_or(Error::InfiniteCritical)?;
    let grid = check_params(laplace)?;
    let gamma_k = gamma_k(model, k);
    let tilt = model.tilted(-r);
    let accs = run_replicates_multi(mc, 0, 5, |rng, out| {
        let path = sample_path(model, &tilt, laplace, rng);
        let p = path_integral(model, &path, &grid, laplace, r, 1.0 - gamma_k, |u, _| g_bar(model, k, u));
        out.copy_from_slice(&[p.fine, p.fine - p.coarse, p.tail, f64::from(u8::from(p.capped)), p.fine - p.shallow]);
    });
    Ok(finish_estimate(&accs, 1.0 / (gamma_k * gamma(r)), HarmonicRegime::Crit, k, r, "tilted-laplace"))
}

/// Both sides of the integral identity at `r = r_k` on common paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub k: usize,
    pub r: f64,
    pub lhs: f64,
    pub lhs_stderr: f64,
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// Standard error of the per-path difference.
    pub diff_stderr: f64,
    pub quad_error: f64,
    /// Change in `lhs - rhs` when the depth drops by [`DEPTH_PROBE`].
    pub depth_error: f64,
    /// `sqrt(diff_stderr² + (quad_error + depth_error)²)`; the test passes
    /// when `|lhs - rhs|` is at most three of these.
    pub combined_error: f64,
    /// Omitted tail of the left-hand integral.
    pub tail: f64,
    pub paths: u64,
    pub pass: bool,
}

/// `γ_k^{-1} E^{(r)}[∫_0^∞ Ḡ_{k,1}(φ_ξ(u)) u^{r-1} du]` against
/// `E^{(r)}[∫_1^{m_0} Q_k(φ_ξ(u)) u^{r-1} du]`.
pub fn identity_check(
    model: &EnvironmentModel,
    table: &QTable,
    laplace: &LaplaceParams,
    mc: McParams,
) -> Result<IdentityCheck> {
    let k = table.k;
    let r = solve_r_k(model, k).finite().ok_or(Error::InfiniteCritical)?;
    let grid = check_params(laplace)?;
    let gamma_k = gamma_k(model, k);
    let tilt = model.tilted(-r);
    let (nodes, weights) = gauss_legendre(IDENTITY_NODES);
    let shallow_params = probe(laplace);
    let accs = run_replicates_multi(mc, 0, 6, |rng, out| {
        let path = sample_path(model, &tilt, laplace, rng);
        let p = path_integral(model, &path, &grid, laplace, r, 1.0 - gamma_k, |u, _| g_bar(model, k, u));
        let m0 = model.law(path.state(0)).mean();
        let half = 0.5 * (m0 - 1.0);
        let us: Vec<f64> = nodes.iter().map(|x| 1.0 + half * (x + 1.0)).collect();
        let rhs_at = |params: &LaplaceParams| -> f64 {
            let phi = approx_on(&path, model, &us, params);
            us.iter()
                .zip(&weights)
                .zip(&phi.values)
                .map(|((&u, &w), &v)| w * half * q_eval_unchecked(table, v).value * u.powf(r - 1.0))
                .sum()
        };
        let lhs = p.fine / gamma_k;
        let rhs = rhs_at(laplace);
        let shallow_diff = p.shallow / gamma_k - rhs_at(&shallow_params);
        out.copy_from_slice(&[
            lhs,
            rhs,
            lhs - rhs,
            (p.fine - p.coarse) / gamma_k,
            p.tail / gamma_k,
            (lhs - rhs) - shallow_diff,
        ]);
    });
    let lhs = accs[0].finish(0.0, mc.seed);
    let rhs = accs[1].finish(0.0, mc.seed);
    let diff = accs[2].finish(0.0, mc.seed);
    let quad_error = accs[3].mean().abs();
    let depth_error = accs[5].mean().abs();
    let combined_error = diff.stderr.hypot(quad_error + depth_error);
    Ok(IdentityCheck {
        k,
        r,
        lhs: lhs.mean,
        lhs_stderr: lhs.stderr,
        rhs: rhs.mean,
        rhs_stderr: rhs.stderr,
        diff_stderr: diff.stderr,
        quad_error,
        depth_error,
        combined_error,
        tail: accs[4].mean(),
        paths: lhs.replicates,
        pass: diff.mean.abs() <= 3.0 * combined_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::fixtures::*;
    use crate::exact_engine::{harmonic_moments, TruncatedKernel};
    use crate::monte_carlo::substream;
    use crate::small_value::q_table;
    use approx::assert_relative_eq;

    fn gw_path(n: usize) -> (EnvironmentModel, EnvPath) {
        let model = gw_half();
        let path = EnvPath::new(&model, vec![0; n]).unwrap();
        (model, path)
    }

    #[test]
    fn laplace_basics() {
        let (model, path) = gw_path(60);
        assert_eq!(quenched_laplace(&path, &model, 0.0, 30).unwrap(), 1.0);
        let a = quenched_laplace(&path, &model, 1.0, 30).unwrap();
        let b = quenched_laplace(&path, &model, 1.0, 40).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} {b}");
        assert!(quenched_laplace(&path, &model, 2.0, 40).unwrap() <= b);
        assert!(matches!(
            quenched_laplace(&path, &model, 1.0, 61),
            Err(Error::PathTooShort { needed: 61, len: 60 })
        ));
    }

    #[test]
    fn depth_stability_on_random_paths() {
        let model = two_env();
        let tilt = model.tilted(0.0);
        for seed in 0..20 {
            let path = EnvPath::sample(&model, &tilt, 40, &mut substream(seed, 0));
            for t in [0.1, 1.0, 10.0] {
                let a = quenched_laplace(&path, &model, t, 30).unwrap();
                let b = quenched_laplace(&path, &model, t, 40).unwrap();
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn laplace_values_non_increasing() {
        let (model, path) = gw_path(200);
        let approx = laplace_approx(&path, &model, &LaplaceParams::default()).unwrap();
        assert!(approx.values.windows(2).all(|w| w[1] <= w[0]));
        assert!(approx.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(approx.depths.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn g_bar_matches_direct_difference() {
        let model = two_env();
        let g = gamma_k(&model, 2);
        for u in [0.0, 0.1, 0.5, 0.9, 1.0] {
            let direct: f64 =
                model.states().map(|(w, l)| w * l.pgf(u).unwrap().powi(2)).sum::<f64>() - g * u * u;
            assert!((g_bar(&model, 2, u) - direct).abs() < 1e-15);
            assert!(g_bar(&model, 2, u) >= 0.0);
        }
        assert_relative_eq!(g_bar(&model, 1, 1.0), 1.0 - gamma_k(&model, 1), epsilon = 1e-15);
    }

    #[test]
    fn regimes_and_normalizer() {
        let model = gw_half();
        let r1 = solve_r_k(&model, 1).to_f64();
        assert_eq!(HarmonicRegime::classify(1.0, ExtReal::Finite(r1)), HarmonicRegime::Sub);
        assert_eq!(HarmonicRegime::classify(r1, ExtReal::Finite(r1)), HarmonicRegime::Crit);
        assert_eq!(HarmonicRegime::classify(3.0, ExtReal::Finite(r1)), HarmonicRegime::Super);
        assert_relative_eq!(normalizer(&model, 1, 3.0, 4), 0.5f64.powi(4), max_relative = 1e-14);
        assert_relative_eq!(normalizer(&model, 1, r1, 4), 4.0 * 0.5f64.powi(4), max_relative = 1e-12);
        assert_relative_eq!(normalizer(&model, 1, 1.0, 4), (2.0f64 / 3.0).powi(4), max_relative = 1e-14);
    }

    #[test]
    fn super_series_and_integral_agree() {
        let model = gw_half();
        let kernel = TruncatedKernel::new(&model, 2048).unwrap();
        let table = q_table(&kernel, 1, 2000).unwrap();
        let c = constant_super(&table, &model, 3.0).unwrap();
        assert!(c.value > 1.25);
        assert!((c.value - c.cross_check.unwrap()).abs() < 1e-6);
        assert!(c.tail < 1e-3 * c.value);
        assert!(matches!(constant_super(&table, &model, 1.0), Err(Error::RegimeMismatch { .. })));
    }

    #[test]
    fn sub_constant_bounds_exact_ratios() {
        let model = gw_half();
        let est = constant_sub(&model, 1, 1.0, &LaplaceParams::default(), McParams::new(4000, 11)).unwrap();
        assert!(est.value > 0.0 && est.tail < 1e-6);
        let kernel = TruncatedKernel::new(&model, 1024).unwrap();
        let hm = harmonic_moments(&kernel, 1, 1.0, 30).unwrap();
        let ratios: Vec<_> = hm.iter().enumerate().map(|(n, iv)| iv.scale(1.5f64.powi(n as i32))).collect();
        assert!(ratios.windows(2).all(|w| w[1].upper >= w[0].lower));
        let slack = 3.0 * est.stderr + est.quad_error + est.depth_error;
        assert!(ratios[30].lower <= est.value + slack);
        assert!(est.value <= ratios[30].upper + slack + 1e-4);
    }

    #[test]
    fn crit_requires_finite_exponent() {
        let degenerate = EnvironmentModel::from_pmfs("two", &[(1.0, vec![(2, 1.0)])], 8).unwrap();
        assert!(matches!(
            constant_crit(&degenerate, 1, &LaplaceParams::default(), McParams::new(10, 1)),
            Err(Error::InfiniteCritical)
        ));
    }

    /// `(E_{n+1} - γ E_n)/γ^{n+1}` increases to `C(k, r_k)`.
    fn crit_oracle(model: &EnvironmentModel, n: usize) -> (f64, f64) {
        let r = solve_r_k(model, 1).to_f64();
        let g = gamma_k(model, 1);
        let kernel = TruncatedKernel::new(model, 4096).unwrap();
        let hm = harmonic_moments(&kernel, 1, r, n + 1).unwrap();
        let scale = g.powi(n as i32 + 1);
        ((hm[n + 1].lower - g * hm[n].upper) / scale, (hm[n + 1].upper - g * hm[n].lower) / scale)
    }

    #[test]
    fn crit_constant_matches_exact_increments() {
        let model = gw_half();
        let est = constant_crit(&model, 1, &LaplaceParams::default(), McParams::new(4, 2)).unwrap();
        let (lo, _) = crit_oracle(&model, 20);
        assert!(lo <= est.value && est.value - lo < 1e-3, "{lo} vs {est:?}");
        let model = two_env();
        let est = constant_crit(&model, 1, &LaplaceParams::default(), McParams::new(4000, 2)).unwrap();
        let (lo, hi) = crit_oracle(&model, 15);
        assert!(est.value + 3.0 * est.stderr >= lo && est.value - 3.0 * est.stderr <= hi + 2e-3, "{lo} {hi} {est:?}");
    }

    #[test]
    fn identity_holds_for_deterministic_environment() {
        let model = gw_half();
        let kernel = TruncatedKernel::new(&model, 1024).unwrap();
        let table = q_table(&kernel, 1, 1024).unwrap();
        let id = identity_check(&model, &table, &LaplaceParams::default(), McParams::new(4, 1)).unwrap();
        assert!(id.pass, "{id:?}");
        assert!(id.rhs > 0.0 && id.diff_stderr == 0.0);
        assert!((id.lhs - id.rhs).abs() < 1e-7);
    }
}
