use std::path::Path;
use std::process::{Command, Output};

fn manipure(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manipure"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn print_config_emits_resolved_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = manipure(dir.path(), &["--seed", "9", "--out", "elsewhere", "--print-config"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["output_dir"], "elsewhere");
}

#[test]
fn bad_config_exits_with_code_2_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"attack": {"epsilon": "big"}}"#).unwrap();
    let out = manipure(dir.path(), &["--config", "c.json", "eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("attack.epsilon"), "{}", stderr(&out));

    let out = manipure(dir.path(), &["--config", "missing.json", "eval"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_prerequisite_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = manipure(dir.path(), &["train-clf"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("gen-data"), "{}", stderr(&out));
}

#[test]
fn no_subcommand_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(manipure(dir.path(), &[]).status.code(), Some(2));
}
