use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faithbench")).args(args).output().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"name = "cli"
seeds = [0, 1]
models = ["lstm-dot"]
methods = ["rawatt", "attgrad", "random"]
eval_examples = 4

[model]
embed_dim = 8
hidden_dim = 8

[train]
max_epochs = 2
learning_rate = 0.01

[[datasets]]
name = "toy"
[datasets.source]
kind = "synthetic"
examples = 80
seed = 3
"#,
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out").display().to_string();

    let o = run(&["evaluate", "--config", &cfg, "--out", &out]);
    assert!(!o.status.success(), "evaluate without checkpoints must fail");

    let o = run(&["train", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in [0, 1] {
        assert!(dir.path().join(format!("out/checkpoints/toy/lstm-dot-seed{seed}.json")).exists());
    }
    let o = run(&["evaluate", "--config", &cfg, "--out", &out, "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("dataset,model,method,AUCTP"));
    assert_eq!(table.lines().count(), 4);
    assert!(dir.path().join("out/evaluate/toy/lstm-dot-seed1/summary.csv").exists());
    assert!(!dir.path().join("out/evaluate/toy/lstm-dot-seed0").exists());

    let o = run(&["ablate", "--config", &cfg, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 4);
}

#[test]
fn bad_method_in_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "methods = [\"lime\"]\n").unwrap();
    let o = run(&["train", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lime"));
}

#[test]
fn default_config_parses_back() {
    let o = run(&["default-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[[datasets]]"));
}
