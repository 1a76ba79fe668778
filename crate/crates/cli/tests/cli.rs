use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3
output_dir = "out"

[dataset]
kind = "synthetic"
num_classes = 3
samples_per_class = 30
test_samples_per_class = 20
input_dim = 6
cluster_separation = 3.0
seed = 2

[model]
kind = "mlp"
layer_sizes = [6, 12, 3]

[train]
regime = "vanilla"
epochs = 2
batch_size = 16
learning_rate = 0.05

[eval]
runs = 12
sigma_grid = [0.0, 0.2]

[beta_search]
epochs = 1
runs = 5

[sweep]
seeds = [0]
"#;

fn ovf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovf"))
        .args(args)
        .env("OVF_LOG", "warn")
        .env_remove("OVF_CONFIG")
        .env_remove("OVF_SIGMA_D")
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let path = config.to_str().unwrap().to_string();
    (dir, path)
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(ovf(&["train", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn missing_config_is_a_usage_error() {
    assert_eq!(ovf(&["train", "--config", "/nonexistent/config.toml"]).status.code(), Some(2));
}

#[test]
fn invalid_override_is_a_usage_error() {
    let (_dir, config) = setup();
    let out = ovf(&["train", "--config", &config, "--sigma-d", "-0.1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let (dir, config) = setup();
    assert_eq!(ovf(&["eval", "--config", &config]).status.code(), Some(2));
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(ovf(&["eval", "--config", &config, "--checkpoint", s(&missing)]).status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let (dir, config) = setup();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = ovf(&["eval", "--config", &config, "--checkpoint", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_eval_at_zero_variation() {
    let (dir, config) = setup();
    let out_dir = dir.path().join("train");
    let out = ovf(&["train", "--config", &config, "-o", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "metrics.csv", "manifest.toml"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(rows(&out_dir.join("metrics.csv")).len(), 2);

    let eval_dir = dir.path().join("eval");
    let ckpt = out_dir.join("model.ckpt");
    let out = ovf(&["eval", "--config", &config, "-o", s(&eval_dir), "--checkpoint", s(&ckpt), "--sigma-d", "0.0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = rows(&eval_dir.join("eval.csv"));
    assert_eq!(table.len(), 1);
    assert_eq!(table[0][0], "vanilla");
    assert_eq!(table[0][2], "12");
    assert_eq!(table[0][4].parse::<f64>().unwrap(), 0.0);

    let out = ovf(&["report", s(&eval_dir.join("eval.csv"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("vanilla"));
}

#[test]
fn sweep_covers_every_regime_and_sigma() {
    let (dir, config) = setup();
    let out_dir = dir.path().join("sweep");
    let out = ovf(&["sweep", "--config", &config, "-o", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = rows(&out_dir.join("sweep.csv"));
    assert_eq!(table.len(), 6);
    let regimes: Vec<&str> = table.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(regimes, ["vanilla", "vanilla", "noise_injection", "noise_injection", "ovf", "ovf"]);
}

#[test]
fn beta_search_reports_each_candidate() {
    let (dir, config) = setup();
    let out_dir = dir.path().join("beta");
    let out = ovf(&["beta-search", "--config", &config, "-o", s(&out_dir), "--sigma-d", "0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = rows(&out_dir.join("beta_search.csv"));
    assert_eq!(table.len(), 4);
    assert_eq!(table.iter().filter(|r| r[4] == "selected").count(), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("best beta"));
}

#[test]
fn report_of_missing_file_is_a_usage_error() {
    assert_eq!(ovf(&["report", "/nonexistent.csv"]).status.code(), Some(2));
}
