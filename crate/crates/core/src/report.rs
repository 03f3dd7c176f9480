//! CSV tables and JSON summaries for the batch subcommands.
//!
//! Floats are written as `{:.16e}` (17 significant digits), so equal
//! results give equal bytes.

use serde::Serialize;
use serde_json::{json, Value};

use crate::diagnostics::{clt_series, ratio_deviation_series, ratio_mixture, DEFAULT_EXTRA_GENERATIONS};
use crate::env_model::EnvironmentModel;
use crate::error::{Error, Result};
use crate::exact_engine::{harmonic_moments, distribution_of_zn, TruncatedKernel, DEFAULT_CAP};
use crate::limit_constants::{
    constant_crit, constant_sub, constant_super, identity_check, log_normalizer, HarmonicRegime, LaplaceParams,
};
use crate::monte_carlo::{
    departure_estimate, estimate_harmonic, estimate_lower_deviation, run_replicates_multi, simulate, McParams,
};
use crate::rate_fn::{deviation_threshold, solve_r_k, RateFunction};
use crate::small_value::q_table;

/// Number of coefficients behind the series constant and the identity check.
pub const SERIES_TERMS: usize = 1024;

/// Largest threshold for which `deviation` adds the exact tail.
pub const EXACT_TAIL_LIMIT: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subcommand {
    Rates,
    Qtable,
    Hmoments,
    Deviation,
    Constants,
    Identity,
    Clt,
    Ratio,
    Simulate,
}

impl Subcommand {
    pub const ALL: [Subcommand; 9] = [
        Subcommand::Rates,
        Subcommand::Qtable,
        Subcommand::Hmoments,
        Subcommand::Deviation,
        Subcommand::Constants,
        Subcommand::Identity,
        Subcommand::Clt,
        Subcommand::Ratio,
        Subcommand::Simulate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subcommand::Rates => "rates",
            Subcommand::Qtable => "qtable",
            Subcommand::Hmoments => "hmoments",
            Subcommand::Deviation => "deviation",
            Subcommand::Constants => "constants",
            Subcommand::Identity => "identity",
            Subcommand::Clt => "clt",
            Subcommand::Ratio => "ratio",
            Subcommand::Simulate => "simulate",
        }
    }
}

/// Numeric parameters shared by the subcommands. Each subcommand reads the
/// fields it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunParams {
    pub k: usize,
    pub r: Option<f64>,
    pub theta: Option<f64>,
    /// Generations, or the number of coefficients for `qtable`.
    pub n: usize,
    pub grid: usize,
    pub replicates: u64,
    pub seed: u64,
    pub tilt: Option<f64>,
    pub cap: usize,
    /// Deviation level of the ratio estimator.
    pub a: f64,
    /// Moment order of the ratio bound.
    pub p: f64,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            k: 1,
            r: None,
            theta: None,
            n: 10,
            grid: 100,
            replicates: 10_000,
            seed: 1,
            tilt: None,
            cap: DEFAULT_CAP,
            a: 0.4,
            p: 2.0,
        }
    }
}

impl RunParams {
    fn mc(&self) -> McParams {
        McParams::new(self.replicates, self.seed)
    }

    fn require_r(&self) -> Result<f64> {
        self.r.ok_or_else(|| Error::Config("--r is required".into()))
    }

    fn require_theta(&self) -> Result<f64> {
        self.theta.ok_or_else(|| Error::Config("--theta is required".into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(x) => format_float(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<u64> for Cell {
    fn from(i: u64) -> Self {
        Cell::Int(i)
    }
}

impl From<usize> for Cell {
    fn from(i: usize) -> Self {
        Cell::Int(i as u64)
    }
}

impl From<bool> for Cell {
    fn from(b: bool) -> Self {
        Cell::Bool(b)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

/// `{:.16e}`, with `inf`, `-inf` and `nan` spelled out.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Self { columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// CSV table plus a JSON summary of scalar results.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: Table,
    pub summary: Value,
}

pub fn run(sub: Subcommand, model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    if params.k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    match sub {
        Subcommand::Rates => rates(model, params),
        Subcommand::Qtable => qtable(model, params),
        Subcommand::Hmoments => hmoments(model, params),
        Subcommand::Deviation => deviation(model, params),
        Subcommand::Constants => constants(model, params),
        Subcommand::Identity => identity(model, params),
        Subcommand::Clt => clt(model, params),
        Subcommand::Ratio => ratio(model, params),
        Subcommand::Simulate => simulate_table(model, params),
    }
}

/// `grid` points spread evenly over `[0.02 μ, 0.98 μ]`.
pub fn theta_grid(mu: f64, grid: usize) -> Vec<f64> {
    match grid {
        0 => Vec::new(),
        1 => vec![0.5 * mu],
        _ => (0..grid).map(|i| mu * (0.02 + 0.96 * i as f64 / (grid - 1) as f64)).collect(),
    }
}

fn rates(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let rf = RateFunction::new(model, params.k)?;
    let mut table = Table::new(&["theta", "chi_star", "lambda_star", "i_k", "regime", "lambda_theta"]);
    for theta in theta_grid(model.mu(), params.grid) {
        let p = rf.chi_star(theta)?;
        table.push(vec![
            p.theta.into(),
            p.chi_star.into(),
            p.lambda_star.to_f64().into(),
            p.i_k.into(),
            p.regime.as_str().into(),
            p.lambda_theta.into(),
        ]);
    }
    let summary = json!({ "constants": rf.constants(), "theta_star": rf.theta_star() });
    Ok(Report { table, summary })
}

fn qtable(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let j_max = params.n.max(params.k);
    let kernel = TruncatedKernel::new(model, j_max)?;
    let t = q_table(&kernel, params.k, j_max)?;
    let mut table = Table::new(&["j", "q", "accessible"]);
    for j in params.k..=j_max {
        table.push(vec![j.into(), t.q[j].into(), t.accessible[j].into()]);
    }
    let summary = json!({
        "k": t.k,
        "gamma_k": t.gamma,
        "growth": t.growth(),
        "recurrence_residual": t.recurrence_residual(&kernel),
    });
    Ok(Report { table, summary })
}

fn hmoments(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let r = params.require_r()?;
    let kernel = TruncatedKernel::new(model, params.cap)?;
    let exact = harmonic_moments(&kernel, params.k, r, params.n)?;
    let mut table = Table::new(&[
        "n", "estimate", "stderr", "tilt", "replicates", "exact_lower", "exact_upper", "a_kn", "regime",
    ]);
    for (n, iv) in exact.iter().enumerate().skip(1) {
        let (estimate, stderr) = if params.replicates > 0 {
            let e = estimate_harmonic(model, params.k as u64, n, r, params.mc())?;
            (e.mean, e.stderr)
        } else {
            (f64::NAN, f64::NAN)
        };
        let (regime, log_a) = log_normalizer(model, params.k, r, n);
        table.push(vec![
            n.into(),
            estimate.into(),
            stderr.into(),
            0.0.into(),
            params.replicates.into(),
            iv.lower.into(),
            iv.upper.into(),
            log_a.exp().into(),
            regime.as_str().into(),
        ]);
    }
    let regime = HarmonicRegime::classify(r, solve_r_k(model, params.k));
    let summary = json!({ "r": r, "regime": regime.as_str(), "r_k": solve_r_k(model, params.k) });
    Ok(Report { table, summary })
}

/// Fixed-tilt estimates when `--tilt` is given, otherwise the stratified
/// first-departure estimator.
fn deviation(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let theta = params.require_theta()?;
    let rf = RateFunction::new(model, params.k)?;
    let chi = rf.chi_star(theta)?.chi_star;
    let x_max = deviation_threshold(theta, params.n);
    let kernel = if x_max <= EXACT_TAIL_LIMIT {
        Some(TruncatedKernel::new(model, (x_max as usize + 1).max(params.k).max(model.max_support()))?)
    } else {
        None
    };
    let method = if params.tilt.is_some() { "tilted" } else { "departure" };
    let mut table = Table::new(&[
        "n", "estimate", "stderr", "tilt", "replicates", "threshold", "exact", "rate", "chi_star", "method",
    ]);
    for n in 1..=params.n {
        let e = match params.tilt {
            Some(lambda) => estimate_lower_deviation(model, params.k as u64, n, theta, lambda, params.mc())?,
            None => departure_estimate(model, params.k, n, theta, params.mc(), n as u64)?,
        };
        let x = deviation_threshold(theta, n);
        let exact = match &kernel {
            Some(kernel) => distribution_of_zn(kernel, params.k, n)?.cdf(x as usize),
            None => f64::NAN,
        };
        table.push(vec![
            n.into(),
            e.mean.into(),
            e.stderr.into(),
            params.tilt.unwrap_or(f64::NAN).into(),
            params.replicates.into(),
            x.into(),
            exact.into(),
            (-e.mean.ln() / n as f64).into(),
            chi.into(),
            method.into(),
        ]);
    }
    let summary = json!({
        "theta": theta,
        "tilt": params.tilt,
        "method": method,
        "chi_star": chi,
        "theta_k": rf.constants().theta_k,
    });
    Ok(Report { table, summary })
}

fn constants(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let r = params.require_r()?;
    let regime = HarmonicRegime::classify(r, solve_r_k(model, params.k));
    let laplace = LaplaceParams::default();
    let est = match regime {
        HarmonicRegime::Super => {
            let kernel = TruncatedKernel::new(model, SERIES_TERMS)?;
            constant_super(&q_table(&kernel, params.k, SERIES_TERMS)?, model, r)?
        }
        HarmonicRegime::Sub => constant_sub(model, params.k, r, &laplace, params.mc())?,
        HarmonicRegime::Crit => constant_crit(model, params.k, &laplace, params.mc())?,
    };
    let mut table = Table::new(&[
        "k", "r", "regime", "value", "error", "quad_error", "depth_error", "tail", "method", "cross_check", "paths",
    ]);
    table.push(vec![
        est.k.into(),
        est.r.into(),
        est.regime.as_str().into(),
        est.value.into(),
        est.stderr.into(),
        est.quad_error.into(),
        est.depth_error.into(),
        est.tail.into(),
        est.method.into(),
        est.cross_check.unwrap_or(f64::NAN).into(),
        est.paths.into(),
    ]);
    Ok(Report { table, summary: serde_json::to_value(&est).expect("serializable") })
}

fn identity(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let kernel = TruncatedKernel::new(model, SERIES_TERMS)?;
    let t = q_table(&kernel, params.k, SERIES_TERMS)?;
    let c = identity_check(model, &t, &LaplaceParams::default(), params.mc())?;
    let mut table = Table::new(&[
        "k", "r", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "diff", "sigma", "quad_error", "depth_error", "tail",
        "paths", "pass",
    ]);
    table.push(vec![
        c.k.into(),
        c.r.into(),
        c.lhs.into(),
        c.lhs_stderr.into(),
        c.rhs.into(),
        c.rhs_stderr.into(),
        (c.lhs - c.rhs).into(),
        c.combined_error.into(),
        c.quad_error.into(),
        c.depth_error.into(),
        c.tail.into(),
        c.paths.into(),
        c.pass.into(),
    ]);
    let summary = json!({ "lhs": c.lhs, "rhs": c.rhs, "sigma": c.combined_error, "pass": c.pass });
    Ok(Report { table, summary })
}

fn clt(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let ns: Vec<usize> = (2..=params.n.max(2)).step_by(2).collect();
    let reports = clt_series(model, params.k, &ns, DEFAULT_EXTRA_GENERATIONS, 1.0, params.mc())?;
    let mut table = Table::new(&["n", "estimate", "bound", "allowance", "regime", "a_kn", "samples", "overflowed"]);
    for c in &reports {
        table.push(vec![
            c.n.into(),
            c.distance.into(),
            c.bound.unwrap_or(f64::NAN).into(),
            c.allowance.into(),
            c.regime.as_str().into(),
            c.a_kn.into(),
            c.samples.into(),
            c.overflowed.into(),
        ]);
    }
    let violations = reports.iter().filter(|c| c.violates_bound()).count();
    let summary = json!({ "m_extra": DEFAULT_EXTRA_GENERATIONS, "epsilon": 1.0, "violations": violations });
    Ok(Report { table, summary })
}

fn ratio(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let ns: Vec<usize> = (1..=params.n).collect();
    let rows = ratio_deviation_series(model, params.k, &ns, params.a, params.p, params.mc())?;
    let kernel = TruncatedKernel::new(model, crate::diagnostics::MAX_EXACT_J)?;
    let mut table = Table::new(&["n", "estimate", "stderr", "bound", "regime", "mixture", "c_p", "a_kn"]);
    for d in &rows {
        let mixture = ratio_mixture(&kernel, params.k, d.n, params.a).unwrap_or(f64::NAN);
        table.push(vec![
            d.n.into(),
            d.estimate.mean.into(),
            d.estimate.stderr.into(),
            d.bound.into(),
            d.regime.as_str().into(),
            mixture.into(),
            d.c_p.into(),
            d.a_kn.into(),
        ]);
    }
    let exceeded = rows.iter().filter(|d| d.exceeds_bound()).count();
    let summary = json!({ "a": params.a, "p": params.p, "exceeded": exceeded });
    Ok(Report { table, summary })
}

/// Means of `W_n` and `log Z_n` per generation, reweighted to the untilted
/// law when `--tilt` is set.
fn simulate_table(model: &EnvironmentModel, params: &RunParams) -> Result<Report> {
    let lambda = params.tilt.unwrap_or(0.0);
    if !lambda.is_finite() {
        return Err(Error::Domain(format!("tilt {lambda} must be finite")));
    }
    if params.replicates == 0 {
        return Err(Error::Config("--replicates must be positive".into()));
    }
    let n = params.n;
    let tilt = model.tilted(lambda);
    let log_norm = tilt.log_normalizer();
    let accs = run_replicates_multi(params.mc(), 0, 2 * (n + 1) + 1, |rng, out| {
        let t = simulate(model, params.k as u64, n, rng, &tilt);
        for j in 0..=n {
            let s = t.path.s(j);
            let weight = (-lambda * s + j as f64 * log_norm).exp();
            let log_z = (t.z[j] as f64).ln();
            out[2 * j] = weight * (log_z - s).exp();
            out[2 * j + 1] = weight * log_z;
        }
        out[2 * (n + 1)] = f64::from(u8::from(t.overflowed));
    });
    let mut table = Table::new(&["n", "estimate", "stderr", "tilt", "replicates", "mean_log_z", "mean_log_z_stderr"]);
    for j in 0..=n {
        let w = accs[2 * j].finish(lambda, params.seed);
        let z = accs[2 * j + 1].finish(lambda, params.seed);
        table.push(vec![
            j.into(),
            w.mean.into(),
            w.stderr.into(),
            lambda.into(),
            params.replicates.into(),
            z.mean.into(),
            z.stderr.into(),
        ]);
    }
    let summary = json!({ "overflowed": accs[2 * (n + 1)].hits(), "tilt": lambda });
    Ok(Report { table, summary })
}
