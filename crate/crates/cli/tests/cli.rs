//! End-to-end runs of the installed binary, exercising exit codes, file
//! outputs, and the reproducibility contracts of each command.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnroute"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn generation_is_reproducible_and_count_zero_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        assert_ok(&run(&[
            "generate", "--problem", "cvrp", "--n", "7", "--count", "12", "--seed", "42", "--out",
            path_str(out),
        ]));
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap(), "same seed must give identical files");
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 12);

    let empty = dir.path().join("empty.jsonl");
    assert_ok(&run(&["generate", "--problem", "tsp", "--n", "5", "--count", "0", "--out", path_str(empty.as_path())]));
    assert_eq!(fs::read(&empty).unwrap(), b"");
}

#[test]
fn bad_flags_exit_with_the_config_code() {
    let out = run(&["generate", "--problem", "ftl", "--n", "5", "--count", "1", "--out", "/tmp/x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    // The orienteering problem needs a prize mode.
    let out = run(&["generate", "--problem", "op", "--n", "5", "--count", "1", "--out", "/tmp/x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["generate", "--problem", "tsp", "--n", "5", "--count", "1", "--prize-mode", "unif", "--out", "/tmp/x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_bound_exits_with_the_capacity_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cvrp.jsonl");
    assert_ok(&run(&["generate", "--problem", "cvrp", "--n", "6", "--count", "2", "--out", path_str(&data)]));
    let out = run(&["oracle", "--data", path_str(&data)]);
    assert_eq!(out.status.code(), Some(3), "no exact solver covers the cvrp");
}

fn write_tiny_config(path: &Path, extra: &str) {
    fs::write(
        path,
        format!(
            "problem = \"tsp\"\nn = 6\nepochs = 2\nsteps = 2\nbatch = 4\nseed = 3\n\
             eval_set_size = 8\nval_set_size = 8\n{extra}\n\
             [model]\nd_h = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\n"
        ),
    )
    .unwrap();
}

#[test]
fn training_evaluating_and_solving_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    write_tiny_config(&cfg, "");
    let run_dir = dir.path().join("run");
    assert_ok(&run(&["train", "--config", path_str(&cfg), "--out-dir", path_str(&run_dir)]));

    let ckpt = run_dir.join("checkpoint.ckpt");
    let history = run_dir.join("history.jsonl");
    assert!(ckpt.is_file());
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 2);

    // Resuming a finished run must leave the checkpoint untouched.
    let before = fs::read(&ckpt).unwrap();
    assert_ok(&run(&["train", "--resume", path_str(&ckpt), "--out-dir", path_str(&run_dir)]));
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    // Resume refuses configuration flags.
    let out = run(&["train", "--resume", path_str(&ckpt), "--epochs", "5", "--out-dir", path_str(&run_dir)]);
    assert_eq!(out.status.code(), Some(2));

    let data = dir.path().join("tsp6.jsonl");
    assert_ok(&run(&["generate", "--problem", "tsp", "--n", "6", "--count", "8", "--seed", "9", "--out", path_str(&data)]));

    // Greedy evaluation is deterministic; reports must agree byte for byte
    // apart from wall time, which lives in one field.
    let report_a = dir.path().join("a.json");
    let report_b = dir.path().join("b.json");
    for report in [&report_a, &report_b] {
        assert_ok(&run(&[
            "eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&data), "--mode", "greedy",
            "--oracle", "--out", path_str(report),
        ]));
    }
    let mut a: serde_json::Value = serde_json::from_slice(&fs::read(&report_a).unwrap()).unwrap();
    let mut b: serde_json::Value = serde_json::from_slice(&fs::read(&report_b).unwrap()).unwrap();
    a["seconds"] = 0.into();
    b["seconds"] = 0.into();
    assert_eq!(a, b);
    assert!(a["mean_gap"].as_f64().expect("oracle run carries gaps") >= 0.0);
    assert!(fs::metadata(dir.path().join("tsp6.jsonl.oracle.json")).is_ok(), "oracle cache written beside the dataset");

    // A problem mismatch is rejected.
    let other = dir.path().join("op.jsonl");
    assert_ok(&run(&[
        "generate", "--problem", "op", "--n", "6", "--count", "2", "--prize-mode", "dist", "--out", path_str(&other),
    ]));
    let out = run(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&other)]);
    assert_eq!(out.status.code(), Some(1));

    // Solving emits one route per line with nothing but index, actions, cost.
    let out = run(&["solve", "--checkpoint", path_str(&ckpt), "--data", path_str(&data), "--mode", "sample", "--k", "4"]);
    assert_ok(&out);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    for (i, line) in lines.iter().enumerate() {
        let object = line.as_object().unwrap();
        assert_eq!(object.len(), 3);
        assert_eq!(object["index"], i);
        assert_eq!(object["actions"].as_array().unwrap().len(), 6);
        assert!(object["cost"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn baseline_reports_match_direct_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tsp.jsonl");
    assert_ok(&run(&["generate", "--problem", "tsp", "--n", "7", "--count", "10", "--seed", "4", "--out", path_str(&data)]));
    let report = dir.path().join("nn.json");
    assert_ok(&run(&["baseline", "--method", "nn", "--data", path_str(&data), "--out", path_str(&report)]));

    let parsed: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let instances = attnroute::io::load_dataset(&data).unwrap();
    for (i, inst) in instances.iter().enumerate() {
        let direct = attnroute::heuristics::nearest_neighbor(inst).unwrap().cost;
        assert_eq!(parsed["rows"][i]["cost"].as_f64().unwrap(), direct);
    }
    assert_eq!(parsed["method"], "nn");

    // Workers must not change results: rerun single-threaded and compare.
    let report_1 = dir.path().join("nn1.json");
    assert_ok(&run(&["baseline", "--method", "nn", "--data", path_str(&data), "--out", path_str(&report_1), "--workers", "1"]));
    let mut a: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let mut b: serde_json::Value = serde_json::from_slice(&fs::read(&report_1).unwrap()).unwrap();
    a["seconds"] = 0.into();
    b["seconds"] = 0.into();
    assert_eq!(a, b);
}
