//! The `priceform` binary driven end to end in temporary directories.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use priceform_core::features::io::read_datasets;
use serde_json::{json, Value};

fn priceform(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priceform"))
        .args(args)
        .arg("--log-level")
        .arg("warn")
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn universe(n_stocks: usize, messages: u64) -> Value {
    json!({
        "template": {
            "stock_id": "T", "lambda": 1.0, "mu": 1.0, "theta_c": 0.4,
            "initial_depth": 6.0, "levels": 3, "regime": {"kind": "memoryless"}, "seed": 0
        },
        "ranges": {"rate_scale": {"lo": 0.5, "hi": 2.0}},
        "n_stocks": n_stocks,
        "messages": {"lo": messages, "hi": messages},
        "seed": 3
    })
}

/// `simulate` then `build-dataset` into `sim/` and `data/` under `dir`.
fn dataset(dir: &Path, lag: usize) {
    write(dir, "sim.json", &json!({"universe": universe(2, 30_000)}));
    assert_eq!(code(&priceform(&["simulate", "sim.json", "-o", "sim"], dir)), 0);
    write(
        dir,
        "data.json",
        &json!({"simulation": "sim/manifest.json", "features": {"levels": 3},
                "normalization": "per-stock-zscore", "lag": lag, "pooled": true}),
    );
    let o = priceform(&["build-dataset", "data.json", "-o", "data"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train_config(lag: usize, workers: usize) -> Value {
    json!({
        "dataset": "data/manifest.json",
        "model": {"architecture": {"family": "lstm", "units": 4, "layers": 1}, "lag": lag,
                  "opt": {"learning_rate": 0.01, "steps": 60, "batch_size": 16}},
        "n_workers": workers
    })
}

fn checksums(manifest: &Path) -> Vec<(String, String)> {
    read_json(manifest)["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["path"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn simulate_writes_one_file_per_stock_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sim.json", &json!({"universe": universe(2, 5_000)}));
    assert_eq!(code(&priceform(&["simulate", "sim.json", "-o", "a"], d)), 0);
    assert_eq!(code(&priceform(&["simulate", "sim.json", "-o", "b"], d)), 0);
    let files: Vec<_> = std::fs::read_dir(d.join("a/messages")).unwrap().collect();
    assert_eq!(files.len(), 2);
    let a = checksums(&d.join("a/manifest.json"));
    assert_eq!(a.iter().filter(|f| f.0.starts_with("messages/")).count(), 2);
    assert_eq!(a, checksums(&d.join("b/manifest.json")));
    assert!(!d.join("a/.priceform.lock").exists());

    assert_eq!(code(&priceform(&["simulate", "sim.json", "-o", "c", "--seed", "99"], d)), 0);
    assert_ne!(a, checksums(&d.join("c/manifest.json")));
    assert_eq!(read_json(&d.join("c/manifest.json"))["config"]["universe"]["seed"], 99);
}

#[test]
fn invalid_rates_are_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut u = universe(2, 1_000);
    u["template"]["lambda"] = json!(0.0);
    write(d, "bad.json", &json!({"universe": u}));
    let o = priceform(&["simulate", "bad.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lambda"), "{}", stderr(&o));

    write(d, "typo.json", &json!({"universe": universe(2, 1_000), "extra": 1}));
    let o = priceform(&["simulate", "typo.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));

    let o = priceform(&["simulate", "missing.json"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn pooled_file_holds_every_stock_and_lag_is_pinned() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, 1);
    let m = read_json(&d.join("data/manifest.json"));
    let per_stock: u64 = m["extra"]["stocks"].as_array().unwrap().iter().map(|s| s["samples"].as_u64().unwrap()).sum();
    let pooled = read_datasets(d.join("data/datasets/pooled.csv")).unwrap();
    assert_eq!(pooled.len(), 2);
    assert_eq!(pooled.iter().map(|p| p.n_samples() as u64).sum::<u64>(), per_stock);
    assert!(per_stock > 100);

    // rebuilding the same directory for another lag is refused
    let mut cfg = read_json(&d.join("data.json"));
    cfg["lag"] = json!(5);
    write(d, "data5.json", &cfg);
    let o = priceform(&["build-dataset", "data5.json", "-o", "data"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lag"), "{}", stderr(&o));
}

#[test]
fn training_is_reproducible_and_reports_staleness() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, 3);
    write(d, "train.json", &train_config(3, 1));
    for out in ["t1", "t2"] {
        let o = priceform(&["train", "train.json", "-o", out], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(d.join("t1/model.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(d.join("t2/model.ckpt")).unwrap());
    assert!(read_json(&d.join("t1/train_report.json"))["staleness_histogram"].is_null());
    let acc = std::fs::read_to_string(d.join("t1/accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 3, "{acc}");

    write(d, "async.json", &train_config(3, 4));
    let o = priceform(&["train", "async.json", "-o", "t4"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&d.join("t4/train_report.json"));
    let hist: Vec<u64> = serde_json::from_value(r["staleness_histogram"].clone()).unwrap();
    assert!(hist.len() <= 17);
    assert_eq!(hist.iter().sum::<u64>(), r["applied_updates"].as_u64().unwrap());

    write(d, "lag.json", &train_config(2, 1));
    let o = priceform(&["train", "lag.json", "-o", "tl"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lag"), "{}", stderr(&o));

    // tampering with a dataset is caught by the manifest
    let file = d.join("data/datasets/T000.csv");
    let mut body = std::fs::read_to_string(&file).unwrap();
    body.push('\n');
    std::fs::write(&file, body).unwrap();
    let o = priceform(&["train", "train.json", "-o", "t3"], d);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "train.json", &train_config(1, 1));
    let o = priceform(&["train", "train.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "sim.json", &json!({"universe": universe(1, 1_000)}));
    std::fs::create_dir_all(d.join("out")).unwrap();
    std::fs::write(d.join("out/.priceform.lock"), "").unwrap();
    let o = priceform(&["simulate", "sim.json"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = priceform(&["experiment", "alchemy", "x.json"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nonlinearity"), "{}", stderr(&o));
}

#[test]
fn experiments_write_reports_and_feed_each_other() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = json!({"architecture": {"family": "lstm", "units": 4, "layers": 1},
                       "opt": {"learning_rate": 0.01, "steps": 100, "batch_size": 32}});
    write(
        d,
        "uni.json",
        &json!({"universe": universe(4, 20_000), "held_out": 1, "data": {"features": {"levels": 3}}, "model": model}),
    );
    let o = priceform(&["experiment", "universality", "uni.json", "-o", "uni"], d);
    // a toy run may or may not meet the thresholds; either way it reports
    assert!(matches!(code(&o), 0 | 1), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("held_out_within_1pct"), "{stdout}");
    assert!(d.join("uni/checks.csv").is_file());
    assert!(d.join("uni/models/pooled.ckpt").is_file());
    assert_eq!(read_json(&d.join("uni/manifest.json"))["command"], "experiment");

    std::fs::create_dir_all(d.join("cfg")).unwrap();
    write(
        &d.join("cfg"),
        "sens.json",
        &json!({"universe": universe(1, 20_000), "grid": 3, "checkpoint": "../uni/models/pooled.ckpt"}),
    );
    let o = priceform(&["experiment", "sensitivity", "cfg/sens.json", "-o", "sens"], d);
    assert!(matches!(code(&o), 0 | 1), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("surface_within_0.05_of_oracle"));
}

#[test]
fn published_schemas_are_current() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&priceform(&["schemas", "s"], dir.path())), 0);
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas");
    let mut n = 0;
    for entry in std::fs::read_dir(dir.path().join("s")).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap();
        let published = std::fs::read_to_string(repo.join(name))
            .unwrap_or_else(|_| panic!("schemas/{} missing; run `priceform schemas`", name.to_string_lossy()));
        assert_eq!(std::fs::read_to_string(&p).unwrap(), published, "{} is stale", name.to_string_lossy());
        n += 1;
    }
    assert!(n >= 10);
}

#[test]
fn shipped_pipeline_configs_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    std::fs::create_dir_all(d.join("configs")).unwrap();
    for name in ["simulate", "build-dataset", "train"] {
        std::fs::copy(configs.join(format!("{name}.json")), d.join(format!("configs/{name}.json"))).unwrap();
    }
    for (cmd, out) in [("simulate", "out/sim"), ("build-dataset", "out/dataset"), ("train", "out/train")] {
        let o = priceform(&[cmd, &format!("configs/{cmd}.json"), "-o", out], d);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    assert!(d.join("out/train/model.ckpt").is_file());
}

#[test]
fn shipped_experiment_configs_parse() {
    use priceform_core::eval::experiments::{
        NonlinearityConfig, PathDependenceConfig, SensitivityConfig, StationarityConfig, UniversalityConfig,
    };
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let text = |name: &str| std::fs::read_to_string(configs.join(format!("{name}.json"))).unwrap();
    serde_json::from_str::<NonlinearityConfig>(&text("nonlinearity")).unwrap();
    serde_json::from_str::<UniversalityConfig>(&text("universality")).unwrap();
    serde_json::from_str::<StationarityConfig>(&text("stationarity")).unwrap();
    serde_json::from_str::<PathDependenceConfig>(&text("path_dependence")).unwrap();
    let s = serde_json::from_str::<SensitivityConfig>(&text("sensitivity")).unwrap();
    assert!(s.checkpoint.is_some());
}
