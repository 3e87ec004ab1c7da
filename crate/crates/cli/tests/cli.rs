use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use densevit::data::{read_pgm, write_pgm};
use densevit::detect::Metrics;
use densevit::model::DenseAdVit;
use densevit::{tnsr, Tensor};
use serde_json::Value;

const SMALL: &str = r#"{
  "model": {"image_h": 32, "image_w": 32, "patch_size": 8, "embed_dim": 8, "depth": 2, "num_heads": 2,
            "defm_layers": [1], "mlp_ratio": 2, "cnn_channels": [2, 2, 2, 2]},
  "synth": {"image_h": 32, "image_w": 32, "target_length": [6.0, 10.0], "target_width": [3.0, 5.0],
            "cluster_radius": 6.0},
  "train": {"iters": 6, "batch_size": 2, "score_thresh": 0.01, "eval_every": 3},
  "data": {"train_scenes": 4, "val_scenes": 2, "count": 6}
}"#;

fn densevit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densevit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let ws = workspace();
    let d = ws.path();
    ok(&densevit(
        &["synth", "--config", "small.json", "--count", "10", "--out", "a"],
        d,
    ));
    ok(&densevit(
        &["synth", "--config", "small.json", "--count", "10", "--out", "b"],
        d,
    ));
    assert_eq!(files(&d.join("a/images"), "pgm").len(), 10);
    assert_eq!(files(&d.join("a/annotations"), "txt").len(), 10);
    for rel in ["manifest.json", "images/scene_00007.pgm", "annotations/scene_00002.txt"] {
        assert_eq!(
            std::fs::read(d.join("a").join(rel)).unwrap(),
            std::fs::read(d.join("b").join(rel)).unwrap()
        );
    }

    ok(&densevit(
        &[
            "synth",
            "--config",
            "small.json",
            "--count",
            "10",
            "--seed",
            "9",
            "--out",
            "c",
        ],
        d,
    ));
    assert_ne!(
        std::fs::read(d.join("a/images/scene_00003.pgm")).unwrap(),
        std::fs::read(d.join("c/images/scene_00003.pgm")).unwrap()
    );

    ok(&densevit(&["synth", "--count", "0", "--out", "empty"], d));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.join("empty/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["images"], Value::Array(vec![]));

    std::fs::write(d.join("blocker"), "").unwrap();
    let out = densevit(&["synth", "--count", "1", "--out", "blocker/sub"], d);
    assert_eq!(out.status.code(), Some(2));
}

/// Hand-made one-image-per-case dataset of 32x32 scenes.
fn handmade(dir: &Path, cases: &[(&str, &str)]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut images = Vec::new();
    for (id, ann) in cases {
        write_pgm(dir.join(format!("{id}.pgm")), &Tensor::zeros(&[1, 32, 32])).unwrap();
        std::fs::write(dir.join(format!("{id}.txt")), ann).unwrap();
        images.push(
            serde_json::json!({"id": id, "image_path": format!("{id}.pgm"), "annotation_path": format!("{id}.txt")}),
        );
    }
    let m = serde_json::json!({"images": images, "split": {"train": [], "val": []}});
    std::fs::write(dir.join("manifest.json"), m.to_string()).unwrap();
    dir.join("manifest.json")
}

#[test]
fn mask_heatmaps() {
    let ws = workspace();
    let d = ws.path();
    let manifest = handmade(&d.join("hand"), &[("empty", ""), ("one", "one 13 18 12 6 0.4 ship\n")]);
    ok(&densevit(
        &[
            "mask",
            "--config",
            "small.json",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            "m",
        ],
        d,
    ));

    let empty = read_pgm(d.join("m/empty.density.pgm")).unwrap();
    assert!(empty.data().iter().all(|&v| v == 0.0));

    let one = read_pgm(d.join("m/one.density.pgm")).unwrap();
    let (i, &peak) = one.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    assert_eq!(peak, 1.0);
    assert_eq!((i % 32, i / 32), (13, 18));

    let raw = tnsr::load(d.join("m/one.density.tnsr")).unwrap();
    assert_eq!(raw.numel(), 32 * 32);
    assert_eq!(raw.data()[18 * 32 + 13], 1.0);
    let tokens = tnsr::load(d.join("m/one.tokens.tnsr")).unwrap();
    assert_eq!(tokens.shape(), &[4, 4]);
    assert!((tokens.data().iter().sum::<f64>() * 64.0 - raw.data().iter().sum::<f64>()).abs() < 1e-9);

    let bad = handmade(&d.join("bad"), &[("x", "x 1 1 4 4 0 submarine\n")]);
    assert_eq!(
        densevit(&["mask", "--manifest", bad.to_str().unwrap(), "--out", "n"], d)
            .status
            .code(),
        Some(2)
    );
}

fn read_metrics(line: &str) -> Metrics {
    serde_json::from_str(line).unwrap()
}

#[test]
fn train_then_eval_reproduces_the_log() {
    let ws = workspace();
    let d = ws.path();
    ok(&densevit(&["synth", "--config", "small.json", "--out", "ds"], d));
    ok(&densevit(
        &[
            "train",
            "--config",
            "small.json",
            "--manifest",
            "ds/manifest.json",
            "--out",
            "run",
        ],
        d,
    ));

    let csv = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,lr,total,objectness,box_reg,focus_aux"));
    assert_eq!(lines.count(), 6);
    let echo: Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["iters"], 6);
    assert_eq!(echo["optim"]["lr_base"], 1e-4);

    let evals = std::fs::read_to_string(d.join("run/eval_log.jsonl")).unwrap();
    let rows: Vec<Value> = evals.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(
        rows.iter().map(|r| r["iter"].as_u64().unwrap()).collect::<Vec<_>>(),
        vec![3, 6]
    );
    let logged: Metrics = serde_json::from_value(rows[1]["metrics"].clone()).unwrap();

    let printed = ok(&densevit(&["eval", "--checkpoint", "run/model.ckpt"], d));
    let json: Value = serde_json::from_str(&printed).unwrap();
    for k in ["mAP", "recall", "per_class"] {
        assert!(json.get(k).is_some(), "{k}");
    }
    assert_eq!(read_metrics(&printed), logged);

    let again = ok(&densevit(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--manifest",
            "ds/manifest.json",
            "--config",
            "small.json",
        ],
        d,
    ));
    assert_eq!(read_metrics(&again), logged);
    ok(&densevit(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--split",
            "train",
            "--out",
            "ev",
        ],
        d,
    ));
    assert!(d.join("ev/metrics.json").exists());
    assert_eq!(
        densevit(&["eval", "--checkpoint", "run/model.ckpt", "--split", "test"], d)
            .status
            .code(),
        Some(2)
    );

    let lines = ok(&densevit(
        &[
            "infer",
            "--checkpoint",
            "run/model.ckpt",
            "--manifest",
            "ds/manifest.json",
            "--out",
            "inf",
        ],
        d,
    ));
    assert!(!lines.is_empty());
    for l in lines.lines() {
        let f: Vec<&str> = l.split_whitespace().collect();
        assert_eq!(f.len(), 8, "{l}");
        assert!(f[0].starts_with("scene_"));
        let score: f64 = f[6].parse().unwrap();
        assert!((0.01..=1.0).contains(&score));
    }
    assert_eq!(std::fs::read_to_string(d.join("inf/detections.txt")).unwrap(), lines);
    let single = ok(&densevit(
        &[
            "infer",
            "--checkpoint",
            "run/model.ckpt",
            "--images",
            "ds/images/scene_00001.pgm",
        ],
        d,
    ));
    let expect: String = lines
        .lines()
        .filter(|l| l.starts_with("scene_00001 "))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(single, expect);
}

#[test]
fn training_is_deterministic_and_zero_iterations_saves_the_init() {
    let ws = workspace();
    let d = ws.path();
    ok(&densevit(
        &["train", "--config", "small.json", "--seed", "5", "--out", "a"],
        d,
    ));
    ok(&densevit(
        &["train", "--config", "small.json", "--seed", "5", "--out", "b"],
        d,
    ));
    for f in ["train_log.csv", "eval_log.jsonl"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    // the checkpoints differ only in the recorded output directory
    let (ma, _) = DenseAdVit::load(d.join("a/model.ckpt")).unwrap();
    let (mb, _) = DenseAdVit::load(d.join("b/model.ckpt")).unwrap();
    for (a, b) in ma.store.iter().zip(mb.store.iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }

    ok(&densevit(
        &[
            "train",
            "--config",
            "small.json",
            "--seed",
            "5",
            "--iters",
            "0",
            "--out",
            "z",
        ],
        d,
    ));
    let (m, _) = DenseAdVit::load(d.join("z/model.ckpt")).unwrap();
    let fresh = DenseAdVit::new(m.config.clone(), 5).unwrap();
    for (a, b) in m.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    assert_eq!(
        std::fs::read_to_string(d.join("z/train_log.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn non_finite_training_exits_with_a_usable_checkpoint() {
    let ws = workspace();
    let d = ws.path();
    let mut cfg: Value = serde_json::from_str(SMALL).unwrap();
    cfg["optim"] = serde_json::json!({"lr_base": 1e300, "warmup_iters": 1, "max_grad_norm": 1e300});
    cfg["train"]["iters"] = 20.into();
    std::fs::write(d.join("hot.json"), cfg.to_string()).unwrap();
    let out = densevit(&["train", "--config", "hot.json", "--out", "hot"], d);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let (m, extra) = DenseAdVit::load(d.join("hot/model.ckpt")).unwrap();
    assert!(extra["aborted"].is_string());
    assert!(m.store.iter().all(|p| p.tensor.data().iter().all(|v| v.is_finite())));
}

#[test]
fn eval_rejects_mismatched_checkpoints() {
    let ws = workspace();
    let d = ws.path();
    ok(&densevit(
        &["train", "--config", "small.json", "--iters", "0", "--out", "run"],
        d,
    ));
    let mut other: Value = serde_json::from_str(SMALL).unwrap();
    other["model"]["embed_dim"] = 16.into();
    std::fs::write(d.join("other.json"), other.to_string()).unwrap();
    let out = densevit(&["eval", "--checkpoint", "run/model.ckpt", "--config", "other.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
    std::fs::write(d.join("junk.ckpt"), "junk").unwrap();
    assert_eq!(
        densevit(&["eval", "--checkpoint", "junk.ckpt"], d).status.code(),
        Some(2)
    );
    assert_eq!(
        densevit(&["eval", "--checkpoint", "missing.ckpt"], d).status.code(),
        Some(2)
    );
}

#[test]
fn gradcheck_reports_and_fails_on_corruption() {
    let ws = workspace();
    let d = ws.path();
    let table = ok(&densevit(&["gradcheck", "--out", "gc"], d));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert!(rows.len() >= 6, "{table}");
    assert!(rows.iter().all(|r| r.ends_with("ok")));
    let json: Value = serde_json::from_str(&std::fs::read_to_string(d.join("gc/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), rows.len());

    let out = densevit(&["gradcheck", "--corrupt"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(densevit(&[], d.path()).status.code(), Some(1));
    assert_eq!(densevit(&["fly"], d.path()).status.code(), Some(1));
    assert_eq!(densevit(&["synth", "--count", "many"], d.path()).status.code(), Some(1));
    assert_eq!(
        densevit(&["infer", "--checkpoint", "x"], d.path()).status.code(),
        Some(1)
    );
    assert_eq!(densevit(&["--help"], d.path()).status.code(), Some(0));

    std::fs::write(d.path().join("typo.json"), r#"{"modle": {}}"#).unwrap();
    assert_eq!(
        densevit(&["synth", "--config", "typo.json"], d.path()).status.code(),
        Some(2)
    );
}
