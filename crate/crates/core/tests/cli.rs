//! Drives the `crossdenoise` binary through every subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[synth]
height = 32
width = 32
num_source = 4
num_target_train = 4
num_target_test = 2

[noise]
ratio = 0.5

[run]
epochs = 2
outer_iterations = 1
batch_size = 4
cicl_start_epoch = 1

[matrix]
noise_ratios = [0.5]
strategies = ["none", "CD+CICL+NTL"]
"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossdenoise"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let out = dir.join("out");

    ok(dir, &["generate-data"]);
    for split in ["source", "target_train", "target_test"] {
        assert!(out.join("data").join(split).is_dir(), "{split}");
    }
    ok(dir, &["corrupt-labels", "--level", "high"]);
    let manifest = fs::read_to_string(out.join("data/source_noisy/noise_manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);

    ok(dir, &["train", "--strategy", "CD+CICL+NTL", "--name", "full"]);
    for f in ["config.toml", "metrics.csv", "checkpoint.json", "report.json", "selection_trace.jsonl"] {
        assert!(out.join("full").join(f).is_file(), "{f}");
    }
    let printed = ok(dir, &["evaluate", "--name", "full"]);
    assert!(printed.starts_with("high_b0.5_scratch_CD+CICL+NTL ("), "{printed}");
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("full/evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval["samples"], 2);

    ok(dir, &["report"]);
    let report = out.join("report");
    let csv = fs::read_to_string(report.join("matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("noise_level,noise_ratio,pretrain,strategy,status"));
    for f in ["table.txt", "dice_disc.svg", "dice_cup.svg"] {
        assert!(report.join(f).is_file(), "{f}");
    }
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    // Unknown subcommand, bad flag value, and training before any data exists.
    for args in [&["bogus"][..], &["corrupt-labels", "--level", "medium"], &["train"]] {
        let out = cli(dir, args);
        assert!(!out.status.success(), "{args:?} should fail");
    }
    fs::write(dir.join("tiny.toml"), "[run]\nlearning_rate_seg = -1.0\n").unwrap();
    let out = cli(dir, &["generate-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
