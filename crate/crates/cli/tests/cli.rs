use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn model(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models").join(name)
}

fn bpre(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bpre"));
    cmd.args(args).env_remove("BPRE_THREADS");
    if let Some(t) = threads {
        cmd.env("BPRE_THREADS", t);
    }
    cmd.output().expect("spawn bpre")
}

fn run_in(dir: &Path, sub: &str, model_file: &str, extra: &[&str], threads: Option<&str>) -> Output {
    let m = model(model_file);
    let mut args = vec![sub, "--model", m.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    bpre(&args, threads)
}

#[test]
fn rates_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "rates", "two_env.toml", &["--k", "1", "--grid", "100"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "theta,chi_star,lambda_star,i_k,regime,lambda_theta");
    assert_eq!(lines.count(), 100);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rates.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "rates");
    assert_eq!(manifest["model_label"], "MODEL-2ENV");
    assert_eq!(manifest["model_sha256"].as_str().unwrap().len(), 64);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rates.json")).unwrap()).unwrap();
    assert_eq!(summary["constants"]["gamma_k"].as_f64(), Some(0.35));
}

#[test]
fn floats_carry_seventeen_digits() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "qtable", "gw_half.toml", &["--n", "5"], None);
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("qtable.csv")).unwrap();
    assert_eq!(csv.lines().nth(2).unwrap(), "2,2.0000000000000000e0,true");
}

#[test]
fn identity_summary_has_expected_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "identity", "gw_half.toml", &["--replicates", "200", "--seed", "7"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("identity.json")).unwrap()).unwrap();
    for key in ["lhs", "rhs", "sigma", "pass"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bpre(&["bogus"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing_r = run_in(dir.path(), "hmoments", "gw_half.toml", &[], None);
    assert_eq!(missing_r.status.code(), Some(1));
    let bad_theta = run_in(dir.path(), "deviation", "gw_half.toml", &["--theta", "5"], None);
    assert_eq!(bad_theta.status.code(), Some(1));
    let no_model = bpre(&["rates", "--model", "/nonexistent.toml", "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(no_model.status.code(), Some(1));
    let bad_threads = run_in(dir.path(), "rates", "gw_half.toml", &[], Some("zero"));
    assert_eq!(bad_threads.status.code(), Some(1));
}

#[test]
fn numeric_guard_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "rates", "binary_split.toml", &[], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn csv_is_identical_across_worker_counts() {
    let runs: [(&str, &str, &[&str]); 4] = [
        ("simulate", "two_env.toml", &["--n", "8", "--replicates", "3000", "--seed", "5"]),
        ("deviation", "two_env.toml", &["--n", "8", "--theta", "0.2", "--replicates", "3000", "--tilt", "-1"]),
        ("hmoments", "geo_half.toml", &["--n", "6", "--r", "0.5", "--cap", "512", "--replicates", "3000"]),
        ("ratio", "gw_half.toml", &["--n", "4", "--replicates", "3000"]),
    ];
    for (sub, model_file, extra) in runs {
        let outputs: Vec<Vec<u8>> = ["1", "4", "16"]
            .iter()
            .map(|t| {
                let dir = tempfile::tempdir().unwrap();
                let out = run_in(dir.path(), sub, model_file, extra, Some(t));
                assert_eq!(out.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
                std::fs::read(dir.path().join(format!("{sub}.csv"))).unwrap()
            })
            .collect();
        assert!(outputs.windows(2).all(|w| w[0] == w[1]), "{sub} differs across worker counts");
    }
}

#[test]
fn shipped_models_parse() {
    for name in ["gw_half.toml", "two_env.toml", "geo_half.toml", "binary_split.toml"] {
        bpre_core::env_model::load_model(model(name)).unwrap();
    }
}
