//! Argument parsing, dispatch and artifact writing for the `bpre` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use bpre_core::env_model::parse_model;
use bpre_core::exact_engine::DEFAULT_CAP;
use bpre_core::report::{self, RunParams, Subcommand};
use clap::error::ErrorKind;
use clap::{Args, Parser};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// Caps the worker count of the data-parallel loops.
pub const THREADS_VAR: &str = "BPRE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bpre", version, about = "Harmonic moments and lower deviations of branching processes in random environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Rate function chi*_k and its comparison rate on a theta grid.
    Rates(RunArgs),
    /// Small-value coefficients q_{k,j} for j up to --n.
    Qtable(RunArgs),
    /// Exact and simulated E_k[Z_n^{-r}] for n up to --n.
    Hmoments(RunArgs),
    /// Tilted estimates of P_k(Z_n <= e^{theta n}) for n up to --n.
    Deviation(RunArgs),
    /// The limit constant C(k, r) in the regime selected by --r.
    Constants(RunArgs),
    /// Both sides of the integral identity at r = r_k.
    Identity(RunArgs),
    /// Kolmogorov distance of the normalized W - W_n.
    Clt(RunArgs),
    /// Deviations of the ratio Z_{n+1}/Z_n from the current mean.
    Ratio(RunArgs),
    /// Means of W_n and log Z_n per generation.
    Simulate(RunArgs),
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// Model file (TOML).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long, default_value_t = 10_000)]
    replicates: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Environment tilt lambda (defaults to the optimal tilt for --theta).
    #[arg(long, allow_hyphen_values = true)]
    tilt: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
    /// Deviation level for `ratio`.
    #[arg(long, default_value_t = 0.4)]
    a: f64,
    /// Moment order for `ratio`.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

impl Command {
    fn split(&self) -> (Subcommand, &RunArgs) {
        match self {
            Command::Rates(a) => (Subcommand::Rates, a),
            Command::Qtable(a) => (Subcommand::Qtable, a),
            Command::Hmoments(a) => (Subcommand::Hmoments, a),
            Command::Deviation(a) => (Subcommand::Deviation, a),
            Command::Constants(a) => (Subcommand::Constants, a),
            Command::Identity(a) => (Subcommand::Identity, a),
            Command::Clt(a) => (Subcommand::Clt, a),
            Command::Ratio(a) => (Subcommand::Ratio, a),
            Command::Simulate(a) => (Subcommand::Simulate, a),
        }
    }
}

impl RunArgs {
    fn params(&self) -> RunParams {
        RunParams {
            k: self.k,
            r: self.r,
            theta: self.theta,
            n: self.n,
            grid: self.grid,
            replicates: self.replicates,
            seed: self.seed,
            tilt: self.tilt,
            cap: self.cap,
            a: self.a,
            p: self.p,
        }
    }
}

/// Provenance written next to every CSV.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub model_label: String,
    pub model_path: String,
    pub model_sha256: String,
    pub params: RunParams,
    pub seed: u64,
    pub tool: &'static str,
    pub version: &'static str,
    pub threads: Option<usize>,
    pub csv: String,
    pub csv_sha256: String,
    pub summary: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Numeric(String),
}

impl From<bpre_core::Error> for Failure {
    fn from(e: bpre_core::Error) -> Self {
        if e.is_numeric_guard() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Invalid(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn execute(sub: Subcommand, args: &RunArgs) -> Result<Vec<PathBuf>, Failure> {
    let started = unix_now();
    let threads = threads_from_env()?;
    let text = fs::read(&args.model).map_err(|e| Failure::Invalid(format!("{}: {e}", args.model.display())))?;
    let source = String::from_utf8(text.clone())
        .map_err(|_| Failure::Invalid(format!("{}: not valid UTF-8", args.model.display())))?;
    let model = parse_model(&source)?;
    let params = args.params();

    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Failure::Invalid(format!("thread pool: {e}")))?
    };
    let rep = pool.install(|| report::run(sub, &model, &params))?;

    fs::create_dir_all(&args.out).map_err(|e| Failure::Invalid(format!("{}: {e}", args.out.display())))?;
    let name = sub.as_str();
    let csv_path = args.out.join(format!("{name}.csv"));
    let summary_path = args.out.join(format!("{name}.json"));
    let manifest_path = args.out.join(format!("{name}.manifest.json"));
    let csv = rep.table.to_csv();
    write(&csv_path, &csv)?;
    write(&summary_path, &(serde_json::to_string_pretty(&rep.summary).expect("json value") + "\n"))?;

    let manifest = RunManifest {
        subcommand: name,
        model_label: model.label().to_string(),
        model_path: args.model.display().to_string(),
        model_sha256: sha256_hex(&text),
        params,
        seed: params.seed,
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        threads,
        csv: csv_path.file_name().unwrap().to_string_lossy().into_owned(),
        csv_sha256: sha256_hex(csv.as_bytes()),
        summary: summary_path.file_name().unwrap().to_string_lossy().into_owned(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    write(&manifest_path, &(serde_json::to_string_pretty(&manifest).expect("manifest") + "\n"))?;
    Ok(vec![csv_path, summary_path, manifest_path])
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
        }
    };
    let (sub, args) = cli.command.split();
    match execute(sub, args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            EXIT_INVALID
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric guard: {msg}");
            EXIT_NUMERIC
        }
    }
}
