use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[model]
layers = 2
d_model = 16
d_ff = 32
heads = 2
vocab = 12
max_seq = 8

[task]
train_size = 64
eval_size = 32

[bilevel]
steps = 4
batch_size = 8
e_max = 4
r_max = 4

[finetune]
epochs = 1
batch_size = 8
"#;

fn guilomo(args: &[&str]) -> Output {
    guilomo_env(args, &[])
}

fn guilomo_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_guilomo"));
    cmd.args(args).env_remove("GUILOMO_OUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_with_same_seed_is_reproducible() {
    let (dir, cfg) = setup();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&guilomo(&["search", "--config", s(&cfg), "--seed", "7", "--out", s(&a)]));
    ok(&guilomo(&["search", "--config", s(&cfg), "--seed", "7", "--out", s(&b)]));
    let plan_a = fs::read(a.join("plan.json")).unwrap();
    assert_eq!(plan_a, fs::read(b.join("plan.json")).unwrap());
    let plan: serde_json::Value = serde_json::from_slice(&plan_a).unwrap();
    assert_eq!(plan["metadata"]["seed"], 7);
    assert!(a.join("search/metrics.csv").is_file());
}

#[test]
fn allocate_train_evaluate_and_analyze() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&guilomo(&["search", "--config", s(&cfg), "--out", s(&out)]));
    let ck = out.join("search/checkpoint");
    let plan = dir.path().join("allocated.json");
    ok(&guilomo(&["allocate", "--config", s(&cfg), "--checkpoint", s(&ck), "--plan", s(&plan)]));
    assert_eq!(fs::read(&plan).unwrap(), fs::read(out.join("plan.json")).unwrap());

    let stdout = ok(&guilomo(&[
        "train", "--config", s(&cfg), "--out", s(&out), "--plan", s(&plan), "--checkpoint", s(&ck),
    ]));
    assert!(stdout.contains("epoch 0"), "{stdout}");
    let metrics: serde_json::Value =
        serde_json::from_str(&ok(&guilomo(&["evaluate", "--model", s(&out.join("final/checkpoint"))]))).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(metrics["examples"], 32);

    let report = dir.path().join("report");
    let arg = format!("searched={}", s(&plan));
    let stdout = ok(&guilomo(&["analyze", "--config", s(&cfg), "--out", s(&report), "--plan", &arg]));
    assert!(stdout.contains("searched: avg_experts"), "{stdout}");
    assert!(fs::read_dir(&report).unwrap().next().is_some());
}

#[test]
fn perturb_conserves_total_rank() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&guilomo(&["search", "--config", s(&cfg), "--out", s(&out)]));
    let src = out.join("plan.json");
    let dst = dir.path().join("perturbed.json");
    ok(&guilomo(&[
        "perturb", "--config", s(&cfg), "--plan", s(&src), "--kind", "MRA_random", "--layer", "1", "--output", s(&dst),
    ]));
    let total = |p: &Path| -> u64 {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(p).unwrap()).unwrap();
        v["layers"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|l| l.as_object().unwrap().values())
            .flat_map(|m| m["ranks"].as_array().unwrap().iter().map(|r| r.as_u64().unwrap()))
            .sum()
    };
    assert_eq!(total(&src), total(&dst));
}

#[test]
fn output_env_variable_is_honoured() {
    let (dir, cfg) = setup();
    let out = dir.path().join("from_env");
    ok(&guilomo_env(&["search", "--config", s(&cfg)], &[("GUILOMO_OUT", &out)]));
    assert!(out.join("plan.json").is_file());
}

#[test]
fn exit_codes() {
    assert_eq!(guilomo(&["--help"]).status.code(), Some(0));
    assert_eq!(guilomo(&["search", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(guilomo(&["search", "--config", "/nonexistent/cfg.toml"]).status.code(), Some(1));
    let (dir, cfg) = setup();
    let bad = dir.path().join("missing.json");
    let code = guilomo(&["perturb", "--config", s(&cfg), "--plan", s(&bad), "--kind", "IEN", "--layer", "0"])
        .status
        .code();
    assert_ne!(code, Some(0));
}
