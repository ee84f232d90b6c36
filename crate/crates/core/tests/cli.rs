//! End-to-end runs of the `m3dt` binary on the smoke preset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn m3dt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3dt")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = m3dt(args);
    assert!(
        out.status.success(),
        "m3dt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = m3dt(args);
    assert!(!out.status.success(), "m3dt {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn staged_run(out: &str, seed: &str) {
    let common = ["--preset", "smoke", "--seed", seed, "--out", out];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(common.iter()).map(|s| s.to_string()).collect() };
    for cmd in [
        &["gen-data"][..],
        &["train-backbone"],
        &["group-tasks", "--method", "gradient"],
        &["train-experts"],
        &["train-router"],
        &["evaluate", "--mode", "backbone"],
        &["evaluate", "--mode", "dense"],
        &["evaluate", "--mode", "topk:2"],
        &["evaluate", "--mode", "oracle"],
        &["report"],
    ] {
        let args = with(cmd);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
}

fn check_metrics(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, "step,stage,loss,grad_similarity,grad_conflict,expert_id,mean_normalized_score,seed");
    let mut last: Option<(u32, u64)> = None;
    for line in lines {
        assert_ne!(line, header, "header repeated");
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 8, "{line}");
        // Evaluation rows follow the three training stages.
        let stage = if f[1] == "eval" { 4 } else { f[1].parse::<u32>().unwrap() };
        let key = (stage, f[0].parse::<u64>().unwrap());
        if let Some(prev) = last {
            assert!(key > prev, "(stage, step) {key:?} after {prev:?}");
        }
        last = Some(key);
        for v in [f[2], f[3], f[4], f[6]].into_iter().filter(|v| !v.is_empty()) {
            let digits = v
                .trim_start_matches('-')
                .split(['e', 'E'])
                .next()
                .unwrap()
                .replace('.', "")
                .trim_start_matches('0')
                .len();
            assert!(digits <= 9, "{v} has more than 9 significant digits");
        }
    }
    assert!(last.is_some());
}

#[test]
fn staged_commands_produce_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    staged_run(out, "3");
    let root = dir.path();
    for f in [
        "manifest.json",
        "config.json",
        "metrics.csv",
        "groups.json",
        "report.json",
        "checkpoints/stage1.ckpt",
        "checkpoints/stage2.ckpt",
        "checkpoints/stage3.ckpt",
    ] {
        assert!(root.join(f).is_file(), "{f} missing");
    }
    let manifest = json(&root.join("manifest.json"));
    let n_tasks = manifest["tasks"].as_array().unwrap().len();
    assert_eq!(n_tasks, 16);
    for id in 0..n_tasks {
        let data = fs::read_to_string(root.join(format!("datasets/task_{id}.jsonl"))).unwrap();
        assert_eq!(data.lines().count(), 8);
    }
    check_metrics(&root.join("metrics.csv"));

    let groups = json(&root.join("groups.json"));
    let mut members: Vec<u64> = groups["members"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|g| g.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .collect();
    members.sort();
    assert_eq!(members, (0..16).collect::<Vec<u64>>());

    let report = json(&root.join("report.json"));
    for mode in ["backbone", "dense", "topk:2", "oracle"] {
        let s = report["evaluations"][mode]["mean_score"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&s), "{mode}: {s}");
    }
    assert!(report["oracle_gap"].is_f64());
    assert_eq!(report["freeze"]["backbone_preserved"], Value::Bool(true));
    assert_eq!(report["freeze"]["experts_preserved"], Value::Bool(true));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let path = |i: usize| dirs[i].path().to_str().unwrap().to_string();
    ok(&["run", "--preset", "smoke", "--seed", "9", "--out", &path(0)]);
    ok(&["run", "--preset", "smoke", "--seed", "9", "--out", &path(1)]);
    // Same experiment driven one stage at a time.
    staged_run(&path(2), "9");
    let read = |i: usize, f: &str| fs::read(dirs[i].path().join(f)).unwrap();
    for f in [
        "metrics.csv",
        "groups.json",
        "manifest.json",
        "report.json",
        "checkpoints/stage1.ckpt",
        "checkpoints/stage1_final.ckpt",
        "checkpoints/stage2.ckpt",
        "checkpoints/stage3.ckpt",
    ] {
        assert_eq!(read(0, f), read(1, f), "{f} differs between identical runs");
        if !matches!(f, "metrics.csv" | "report.json") {
            assert_eq!(read(0, f), read(2, f), "{f} differs between run and staged commands");
        }
    }
}

#[test]
fn ablations_land_in_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["run", "--preset", "smoke", "--out", out]);
    for v in ["e2e", "no_grouping", "no_expert_freeze", "oracle_eval", "topk:1", "small"] {
        ok(&["ablate", "--variant", v, "--out", out]);
    }
    let report: Value = serde_json::from_str(&ok(&["report", "--out", out])).unwrap();
    let ablations = report["ablations"].as_object().unwrap();
    for v in ["e2e", "no_grouping", "no_expert_freeze", "oracle_eval", "topk:1", "small"] {
        assert!(ablations.contains_key(v), "{v} missing from report");
    }
    assert_eq!(ablations["no_expert_freeze"]["freeze"]["experts_preserved"], Value::Bool(false));
    assert_eq!(ablations["no_expert_freeze"]["freeze"]["backbone_preserved"], Value::Bool(true));
    assert_eq!(ablations["topk:1"]["freeze"]["experts_preserved"], Value::Bool(true));
    assert!(dir.path().join("ablations/topk_1/checkpoints/stage3.ckpt").is_file());
    check_metrics(&dir.path().join("ablations/e2e/metrics.csv"));
}

#[test]
fn random_grouping_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["gen-data", "--preset", "smoke", "--out", out]);
    ok(&["train-backbone", "--out", out]);
    ok(&["group-tasks", "--method", "random", "--out", out]);
    let groups = json(&dir.path().join("groups.json"));
    assert_eq!(groups["method"], "random");
    let sizes: Vec<usize> = groups["members"].as_array().unwrap().iter().map(|g| g.as_array().unwrap().len()).collect();
    assert_eq!(sizes, vec![4, 4, 4, 4]);
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();

    let cfg_path = dir.path().join("cfg.json");
    let mut cfg: Value = serde_json::from_str(&ok(&["show-config", "--preset", "smoke"])).unwrap();
    cfg["training"]["learning_rate_typo"] = Value::from(0.1);
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let err = fails(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", out]);
    assert!(err.contains("learning_rate_typo"), "{err}");

    let err = fails(&["train-experts", "--preset", "smoke", "--out", out]);
    assert!(err.contains("gen-data"), "{err}");
    ok(&["gen-data", "--preset", "smoke", "--out", out]);
    let err = fails(&["train-experts", "--out", out]);
    assert!(err.contains("train-backbone"), "{err}");

    fails(&["evaluate", "--mode", "topk:0", "--out", out]);
    fails(&["evaluate", "--mode", "sparse", "--out", out]);
    fails(&["group-tasks", "--method", "spectral", "--out", out]);
    fails(&["ablate", "--variant", "everything", "--out", out]);
}
