use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;
use winprune::checkpoint::load_checkpoint;
use winprune::cost::macs_model;
use winprune::model::{ModelConfig, ModelParams};
use winprune::SparsityConfig;

/// A small run: two-block model, tiny synthetic data, short schedules.
fn setup(dir: &Path, extra: Value) -> PathBuf {
    let model = dir.join("model.json");
    std::fs::write(
        &model,
        serde_json::to_string(&ModelConfig::two_block()).unwrap(),
    )
    .unwrap();
    let mut cfg = json!({
        "model": "model.json",
        "data": {"kind": "synthetic", "train": 64, "val": 32, "test": 16},
        "train": {"steps": 6, "batch_size": 8},
        "adapt": {"steps": 4, "batch_size": 8},
        "finetune": {"steps": 4, "batch_size": 8},
        "search": {"population": 4, "elites": 2, "generations": 3},
        "constraint": {"kind": "macs_fraction", "fraction": 0.7},
        "profile": {"warmup": 1, "iters": 4},
        "out_dir": "out",
        "seed": 7
    });
    if let (Some(base), Some(over)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in over {
            base.insert(k.clone(), v.clone());
        }
    }
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn winprune(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_winprune"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn ok(args: &[&str], config: &Path) -> Value {
    let out = winprune(args, config);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn out_dir(config: &Path) -> PathBuf {
    config.parent().unwrap().join("out")
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg = setup(
        dir.path(),
        json!({"train": {"steps": 1, "lr": 0.0, "batch_size": 8}}),
    );
    ok(&["train"], &cfg);
    let model = load_checkpoint(&out_dir(&cfg).join("dense.spwv")).unwrap();
    let init =
        ModelParams::init(&ModelConfig::two_block(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(model.params, init);
}

#[test]
fn missing_dataset_is_reported_with_its_path() {
    let dir = TempDir::new().unwrap();
    let cfg = setup(
        dir.path(),
        json!({"data": {"kind": "cache", "path": "nowhere/data.spwv"}}),
    );
    let out = winprune(&["train"], &cfg);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere/data.spwv"), "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = setup(dir.path(), json!({}));
    let read = |name: &str| std::fs::read(out_dir(&cfg).join(name)).unwrap();
    ok(&["train"], &cfg);
    let first = read("dense.spwv");
    let curve = read("train_curve.csv");
    ok(&["train"], &cfg);
    assert_eq!(first, read("dense.spwv"));
    assert_eq!(curve, read("train_curve.csv"));

    let elsewhere = dir.path().join("seed8");
    let out = Command::new(env!("CARGO_BIN_EXE_winprune"))
        .args(["train", "--seed", "8", "--out"])
        .arg(&elsewhere)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(first, std::fs::read(elsewhere.join("dense.spwv")).unwrap());
}

#[test]
fn full_pipeline_and_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = setup(dir.path(), json!({}));
    let out = out_dir(&cfg);
    let data = ok(&["generate-data"], &cfg);
    assert_eq!(
        (data["train"].as_u64(), data["test"].as_u64()),
        (Some(64), Some(16))
    );
    ok(&["train"], &cfg);
    ok(&["adapt"], &cfg);

    let search = ok(&["search"], &cfg);
    assert_eq!(search["generations_logged"], 3);
    let log = std::fs::read_to_string(out.join("search_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4, "{log}");
    assert!(search["best_resource"].as_f64().unwrap() <= search["budget"].as_f64().unwrap());
    let best = SparsityConfig::from_json(
        &std::fs::read_to_string(out.join("best_sparsity.json")).unwrap(),
    )
    .unwrap();

    let random = ok(&["search", "--baseline", "random"], &cfg);
    assert_eq!(random["mode"], "random");
    assert_eq!(random["evaluations"], 16);

    let exhaustive = ok(&["search", "--exhaustive"], &cfg);
    let two = ModelConfig::two_block();
    let budget = exhaustive["budget"].as_f64().unwrap();
    let admissible = SparsityConfig::enumerate(&two.depths())
        .iter()
        .filter(|c| macs_model(&two, c, (32, 32)).unwrap().total as f64 <= budget)
        .count();
    assert_eq!(
        exhaustive["evaluations"].as_u64().unwrap() as usize,
        admissible
    );
    assert!(exhaustive["best_fitness"].as_f64() >= search["best_fitness"].as_f64());

    // the exhaustive run overwrote best_sparsity.json; finetune the evolved one
    let evolved = dir.path().join("evolved.json");
    std::fs::write(&evolved, best.to_json().unwrap()).unwrap();
    ok(&["finetune", "--sparsity", evolved.to_str().unwrap()], &cfg);
    assert!(out.join("finetuned.spwv").exists());

    let report = ok(&["eval", "--sparsity", evolved.to_str().unwrap()], &cfg);
    for field in [
        "split", "samples", "sparsity", "accuracy", "cost", "latency",
    ] {
        assert!(report.get(field).is_some(), "missing {field}");
    }
    assert_eq!(report["samples"], 16);
    assert_eq!(
        report["cost"]["total"].as_u64().unwrap(),
        macs_model(&two, &best, (32, 32)).unwrap().total
    );
    assert_eq!(report["latency"]["iters"], 4);
    assert!(out.join("eval_report.json").exists());

    let profile = ok(&["profile", "--resolution", "64"], &cfg);
    assert_eq!(profile["resolution"], json!([64, 64]));
}

#[test]
fn dense_heatmap_is_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = setup(dir.path(), json!({}));
    ok(&["train"], &cfg);
    let summary = ok(&["heatmap", "--index", "3"], &cfg);
    assert_eq!(summary["max_count"], summary["total_sublayers"]);
    let pgm = std::fs::read(summary["pgm"].as_str().unwrap()).unwrap();
    let header = b"P5\n32 32\n255\n";
    assert!(pgm.starts_with(header));
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 32 * 32);
    assert!(pixels.iter().all(|&p| p == pixels[0]));

    let out = winprune(&["heatmap", "--index", "999"], &cfg);
    assert!(!out.status.success());
}
