//! CLI contract tests: subcommands, exit codes, and file outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_contactlab")
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("contactlab_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

/// Small fast config used across CLI tests.
fn write_small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "encoder": {"image_size": 28, "embed_dim": 16, "depth": 1, "heads": 2},
  "vertices": 162,
  "vertex_feature_dim": 16,
  "semantic_hidden": 16,
  "optimizer": {"steps": 30, "batch_size": 2, "learning_rate": 0.05},
  "dataset": {"kind": "synthetic", "n": 6, "subdivisions": 2, "plan": {"preset": "feet_dominant"}}
}"#,
    )
    .unwrap();
    path
}

#[test]
fn eval_writes_reports_and_exits_zero() {
    let dir = tmpdir("eval");
    let cfg = write_small_config(&dir);
    let out = dir.join("r");
    let res = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["report.csv", "report.json", "part_histogram.csv", "predictions.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn missing_config_exits_one() {
    let res = run(&["train"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--config"));
}

#[test]
fn unknown_flag_exits_one_with_usage_on_stderr() {
    let res = run(&["eval", "--bogus-flag"]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.to_lowercase().contains("usage") || err.contains("--bogus-flag"), "{err}");
    assert!(res.stdout.is_empty());
}

#[test]
fn gen_data_twice_is_byte_identical() {
    let d1 = tmpdir("gen1");
    let d2 = tmpdir("gen2");
    // Small bespoke config keeps the dataset light.
    let cfgdir = tmpdir("gencfg");
    let cfg = write_small_config(&cfgdir);
    for d in [&d1, &d2] {
        let res = run(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--n",
            "8",
            "--seed",
            "7",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    for f in ["mesh.json", "labels.jsonl", "samples.jsonl", "manifest.json"] {
        let a = std::fs::read(d1.join(f)).unwrap();
        let b = std::fs::read(d2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical gen-data runs");
        assert!(!a.is_empty());
    }
}

#[test]
fn train_then_eval_roundtrip() {
    let dir = tmpdir("trainroundtrip");
    let cfg = write_small_config(&dir);
    let train_out = dir.join("t");
    let res = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(train_out.join("checkpoint.json").exists());
    assert!(train_out.join("loss_curve.csv").exists());
    assert!(train_out.join("phi.csv").exists());

    let eval_out = dir.join("e");
    let res = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        train_out.join("checkpoint.json").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
        "--binary-dump",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(eval_out.join("predictions.bin").exists());
    let csv = std::fs::read_to_string(eval_out.join("report.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("AGGREGATE,"));
}

#[test]
fn analyze_from_labels_and_mesh() {
    let dir = tmpdir("analyze");
    let gen = dir.join("d");
    let cfgdir = tmpdir("analyzecfg");
    let cfg = write_small_config(&cfgdir);
    let res = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        gen.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let out = dir.join("a");
    let res = run(&[
        "analyze",
        "--labels",
        gen.join("labels.jsonl").to_str().unwrap(),
        "--mesh",
        gen.join("mesh.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("imbalance.csv")).unwrap();
    assert!(text.starts_with("part_id,part_name,images_with_contact"));
    assert_eq!(text.lines().count(), 1 + 24 + 1);
}

#[test]
fn corrupt_labels_exit_two() {
    let dir = tmpdir("badlabels");
    let labels = dir.join("labels.jsonl");
    std::fs::write(&labels, "this is not json\n").unwrap();
    let gen = dir.join("d");
    let cfgdir = tmpdir("badlabelscfg");
    let cfg = write_small_config(&cfgdir);
    assert!(run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        gen.to_str().unwrap()
    ])
    .status
    .success());
    let res = run(&[
        "analyze",
        "--labels",
        labels.to_str().unwrap(),
        "--mesh",
        gen.join("mesh.json").to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn diverging_train_exits_three() {
    let dir = tmpdir("diverge");
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "encoder": {"image_size": 28, "embed_dim": 16, "depth": 1, "heads": 2},
  "vertices": 162,
  "vertex_feature_dim": 16,
  "semantic_hidden": 16,
  "optimizer": {"steps": 60, "batch_size": 2, "learning_rate": 1e9, "warmup_steps": 0, "grad_clip": null},
  "dataset": {"kind": "synthetic", "n": 4, "subdivisions": 2, "plan": {"preset": "feet_dominant"}}
}"#,
    )
    .unwrap();
    let res = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn geodesic_distances_csv() {
    let dir = tmpdir("geo");
    // Build a mesh file via the library to keep the format canonical.
    let mesh = contactlab::meshmetrics::icosphere(1);
    let mesh_path = dir.join("mesh.json");
    mesh.save(&mesh_path).unwrap();
    let out = dir.join("g");
    let res = run(&[
        "geodesic",
        "--mesh",
        mesh_path.to_str().unwrap(),
        "--sources",
        "0, 5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("geodesic.csv")).unwrap();
    assert!(text.starts_with("vertex_id,distance_m"));
    assert_eq!(text.lines().count(), 1 + 42);
    let row0: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row0, vec!["0", "0"]);

    // Bad source id is a data error.
    let res = run(&[
        "geodesic",
        "--mesh",
        mesh_path.to_str().unwrap(),
        "--sources",
        "zero",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn ablate_zero_sweep_writes_table() {
    let dir = tmpdir("ablate");
    let cfg = write_small_config(&dir);
    let out = dir.join("a");
    let res = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--axis",
        "zero_out_k_sweep",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);

    let res = run(&["ablate", "--config", cfg.to_str().unwrap(), "--axis", "nope"]);
    assert_eq!(res.status.code(), Some(1));
}
