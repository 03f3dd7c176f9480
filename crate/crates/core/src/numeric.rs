//! Scalar numerics shared by the engines: root bracketing, log-sum-exp,
//! an order-independent accumulator and quadrature rules.

use std::fmt;

use serde::Serialize;

/// A real number that may be `+inf`, used for exponents and rates that
/// are legitimately infinite on degenerate models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ExtReal {
    Finite(f64),
    PosInfinity,
}

impl ExtReal {
    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(x) => Some(x),
            ExtReal::PosInfinity => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, ExtReal::PosInfinity)
    }

    /// The value as an `f64`, with `f64::INFINITY` for the marker.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtReal::Finite(x) => x,
            ExtReal::PosInfinity => f64::INFINITY,
        }
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::Finite(x) => write!(f, "{x}"),
            ExtReal::PosInfinity => f.write_str("inf"),
        }
    }
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
///
/// Runs until the bracket cannot be split further in floating point, so the
/// returned point is the root to machine precision. The endpoint values must
/// have opposite signs (or one of them be zero).
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let mut f_lo = f(lo);
    if f_lo == 0.0 {
        return lo;
    }
    let f_hi = f(hi);
    if f_hi == 0.0 {
        return hi;
    }
    debug_assert!(f_lo.signum() != f_hi.signum(), "bisect: no sign change");
    for _ in 0..2100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return mid;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    if f(lo).abs() <= f(hi).abs() {
        lo
    } else {
        hi
    }
}

/// `log Σ exp(x_i)` without overflow. Returns `-inf` for an empty input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// Exact floating-point summation with a correctly rounded result.
///
/// Keeps a list of non-overlapping partials, so the rounded total depends
/// only on the multiset of added values and not on the order or grouping
/// in which they arrive. Merging two accumulators is therefore exact.
#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
    special: f64,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        if !value.is_finite() {
            self.special += value;
            return;
        }
        let mut x = value;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
        self.special += other.special;
    }

    pub fn value(&self) -> f64 {
        if self.special != 0.0 || self.special.is_nan() {
            return self.special;
        }
        let p = &self.partials;
        let n = p.len();
        if n == 0 {
            return 0.0;
        }
        let mut k = n - 1;
        let mut hi = p[k];
        let mut lo = 0.0;
        while k > 0 {
            k -= 1;
            let x = hi;
            let y = p[k];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        // Round-half-even correction when the remaining partials push the
        // discarded low part past the halfway point.
        if k > 0 && ((lo < 0.0 && p[k - 1] < 0.0) || (lo > 0.0 && p[k - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl Extend<f64> for ExactSum {
    fn extend<T: IntoIterator<Item = f64>>(&mut self, iter: T) {
        for x in iter {
            self.add(x);
        }
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Log-spaced grid `t_i = t_min · e^{i h}` used for integrals over `(0, ∞)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogGrid {
    pub t: Vec<f64>,
    pub h: f64,
}

impl LogGrid {
    /// Grid from `t_min` to at least `t_max` with `per_decade` points per
    /// decade. The number of intervals is rounded up to an even count so the
    /// half-resolution rule is available.
    pub fn new(t_min: f64, t_max: f64, per_decade: usize) -> Self {
        assert!(t_min > 0.0 && t_max > t_min && per_decade >= 1);
        let h = std::f64::consts::LN_10 / per_decade as f64;
        let mut intervals = ((t_max / t_min).ln() / h).ceil() as usize;
        if intervals % 2 == 1 {
            intervals += 1;
        }
        let ln_min = t_min.ln();
        let t = (0..=intervals).map(|i| (ln_min + i as f64 * h).exp()).collect();
        Self { t, h }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t_min(&self) -> f64 {
        self.t[0]
    }

    pub fn t_max(&self) -> f64 {
        self.t[self.t.len() - 1]
    }

    /// Trapezoid rule for `∫ f(t) dt` over the grid given the log-density
    /// values `g_i = t_i f(t_i)`. Returns the full-resolution value and the
    /// value at half resolution.
    pub fn trapezoid(&self, g: &[f64]) -> (f64, f64) {
        assert_eq!(g.len(), self.t.len());
        let n = g.len() - 1;
        let fine: f64 = g.iter().sum::<f64>() - 0.5 * (g[0] + g[n]);
        let coarse: f64 = g.iter().step_by(2).sum::<f64>() - 0.5 * (g[0] + g[n]);
        (fine * self.h, coarse * 2.0 * self.h)
    }
}
