use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spt::checkpoint;
use spt::cli::RunConfig;
use spt::data::load_annotations;
use spt::mask::AttentionMask;
use spt::model::PoseModelParams;

fn spt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spt"))
        .args(args)
        .env("SPT_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest_line(stdout: &str) -> String {
    stdout.lines().find_map(|l| l.strip_prefix("dataset digest: ")).unwrap().to_string()
}

fn small_run(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--batch-size", "2", "--train-count", "6", "--test-count", "4", "--out", s(&out)];
    if !extra.contains(&"--steps") {
        args.extend_from_slice(&["--steps", "3"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_digests() {
    let t = tempfile::tempdir().unwrap();
    let a = digest_line(&ok(&["gen-data", "--count", "4", "--out", s(&t.path().join("a"))]));
    let b = digest_line(&ok(&["gen-data", "--count", "4", "--out", s(&t.path().join("b"))]));
    let c = digest_line(&ok(&["gen-data", "--count", "4", "--seed", "9", "--out", s(&t.path().join("c"))]));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(load_annotations(&t.path().join("a/annotations.json")).unwrap().len(), 4);

    ok(&["gen-data", "--count", "0", "--out", s(&t.path().join("empty"))]);
    assert!(load_annotations(&t.path().join("empty/annotations.json")).unwrap().is_empty());
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let t = tempfile::tempdir().unwrap();
    let run = small_run(t.path(), "r0", &["--steps", "0", "--seed", "4"]);
    let config = RunConfig::load(&run.join("run_config.json")).unwrap();
    let (_, params) = checkpoint::load(&run.join("checkpoint")).unwrap();
    assert_eq!(params, PoseModelParams::init(&config.model, 4).unwrap());
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap(), "");
}

#[test]
fn rerun_from_persisted_config_is_bit_identical() {
    let t = tempfile::tempdir().unwrap();
    let first = small_run(t.path(), "first", &[]);
    let log = fs::read_to_string(first.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for (i, line) in log.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], i + 1);
        assert!(v["loss"].as_f64().unwrap().is_finite());
        assert!(v["wall_ms"].is_u64());
    }
    let second = t.path().join("second");
    ok(&["train", "--config", s(&first.join("run_config.json")), "--out", s(&second)]);
    assert_eq!(dir_bytes(&first.join("checkpoint")), dir_bytes(&second.join("checkpoint")));
    assert_eq!(fs::read(first.join("sparsity.json")).unwrap(), fs::read(second.join("sparsity.json")).unwrap());
}

#[test]
fn eval_writes_both_threshold_columns() {
    let t = tempfile::tempdir().unwrap();
    let run = small_run(t.path(), "r", &[]);
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint"))]);
    let text = fs::read_to_string(run.join("pckh.txt")).unwrap();
    assert!(text.starts_with("# config "));
    let header: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(header.last(), Some(&"Mean@0.1"));
    assert!(header.contains(&"Mean"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("pckh.json")).unwrap()).unwrap();
    assert_eq!(json["thresholds"].as_array().unwrap().len(), 2);
    assert_eq!(json["samples"], 4);
}

#[test]
fn eval_rejects_empty_dataset_and_incompatible_config() {
    let t = tempfile::tempdir().unwrap();
    let run = small_run(t.path(), "r", &[]);
    let empty = t.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let out = spt(&["eval", "--checkpoint", s(&run.join("checkpoint")), "--annotations", s(&empty)]);
    assert_eq!(out.status.code(), Some(3));

    let mut config = RunConfig::load(&run.join("run_config.json")).unwrap();
    config.model.heads = 4;
    fs::write(run.join("run_config.json"), config.to_json()).unwrap();
    let out = spt(&["eval", "--checkpoint", s(&run.join("checkpoint"))]);
    assert_eq!(out.status.code(), Some(6), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn error_classes_map_to_exit_codes() {
    assert_eq!(spt(&["train", "--akr", "0"]).status.code(), Some(3));
    assert_eq!(spt(&["eval", "--checkpoint", "/nonexistent/ckpt"]).status.code(), Some(4));
    assert_eq!(spt(&["train", "--k-mode", "sideways"]).status.code(), Some(2));
}

fn exported_stages(dir: &Path) -> Vec<AttentionMask> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("stage_"))
        .collect();
    names.sort();
    names.iter().map(|p| AttentionMask::from_pbm(&fs::read_to_string(p).unwrap()).unwrap()).collect()
}

#[test]
fn mask_exports() {
    let t = tempfile::tempdir().unwrap();
    let run = small_run(t.path(), "r", &[]);
    let ckpt = run.join("checkpoint");

    let dense = t.path().join("dense");
    ok(&["masks", "--checkpoint", s(&ckpt), "--akr", "1.0", "--out", s(&dense)]);
    let stages = exported_stages(&dense);
    assert_eq!(stages.len(), 2);
    assert!(stages.iter().all(|m| m.is_all_ones()));

    let pruned = t.path().join("pruned");
    ok(&["masks", "--checkpoint", s(&ckpt), "--out", s(&pruned)]);
    let stages = exported_stages(&pruned);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(pruned.join("masks.json")).unwrap()).unwrap();
    let history: Vec<usize> = serde_json::from_value(meta["history"].clone()).unwrap();
    assert_eq!(stages.len(), history.len() - 1);
    for (m, total) in stages.iter().zip(&history[1..]) {
        let recount: usize = (0..m.rows()).map(|r| m.row(r).iter().filter(|b| **b).count()).sum();
        assert_eq!(recount, *total);
    }
    for name in ["joint_mask.pbm", "heatmap_00.pgm", "heatmap_04.pgm", "attention_encoder_01.csv", "attention_graph_02.csv"] {
        assert!(pruned.join(name).exists(), "{name}");
    }
    let joint = AttentionMask::from_pbm(&fs::read_to_string(pruned.join("joint_mask.pbm")).unwrap()).unwrap();
    assert_eq!(joint.shape(), [5, 5]);
}

#[test]
fn sweep_appends_dense_row() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("sweep");
    let stdout = ok(&[
        "sweep", "--steps", "0", "--train-count", "2", "--test-count", "6", "--akrs", "0.5,0.6", "--out", s(&out),
    ]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["akr"], 1.0);
    assert!(rows.iter().all(|r| r["final_loss"].is_null()));
    assert!(out.join("akr_0.5.json").exists() && out.join("akr_1.0.json").exists());
    assert!(stdout.contains("AKR = 0.6"));
}
