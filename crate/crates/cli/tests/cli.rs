use std::io::Write;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn charedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_charedit")).args(args).env_remove("CHAREDIT_ARTIFACTS").output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn localize_prints_labels_and_channels() {
    let v = stdout_json(&charedit(&["localize", "make the nose a bit bigger"]));
    assert_eq!(v["labels"], serde_json::json!(["nose"]));
    assert!(!v["channels"].as_array().unwrap().is_empty());
}

#[test]
fn built_artifacts_give_the_same_solve_as_the_synthetic_stack() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("art");
    let out = charedit(&["artifacts", "build", "--scale", "desk", "--seed", "1", "--out", art.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = stdout_json(&charedit(&["solve", "bigger nose", "--steps", "20"]));
    let b = stdout_json(&charedit(&["--artifacts", art.to_str().unwrap(), "solve", "bigger nose", "--steps", "20"]));
    assert_eq!(a, b);
    assert_eq!(a["loss_trace"].as_array().unwrap().len(), 21);

    // edit from a parameter file, restricted to the nose
    let params = dir.path().join("face.json");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(art.join("manifest.json")).unwrap()).unwrap();
    let file = serde_json::json!({ "schema_hash": manifest["schema_hash"], "values": a["x_final"] });
    std::fs::write(&params, file.to_string()).unwrap();
    let e = stdout_json(&charedit(&[
        "edit",
        "wider eyes",
        "--params",
        params.to_str().unwrap(),
        "--labels",
        "eyes",
        "--strength",
        "0.75",
    ]));
    let before = a["x_final"].as_array().unwrap();
    let after = e["x_final"].as_array().unwrap();
    let mask = e["edited_channels"].as_array().unwrap();
    for i in 0..before.len() {
        if mask[i] == 0 {
            assert_eq!(before[i], after[i], "channel {i}");
        }
    }
    assert!(!charedit(&["edit", "x", "--labels", "tail"]).status.success());
}

#[test]
fn chat_log_replays() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_charedit"))
        .args(["chat", "--session-dir", dir.path().to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"make the nose slightly bigger\na bit more\n/undo\nmake the eyes wider\n/quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("s=0.25") && text.contains("s=0.4") && text.contains("undid round 2"), "{text}");
    let log = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .unwrap();
    let v = stdout_json(&charedit(&["replay", log.to_str().unwrap()]));
    assert_eq!(v["rounds"], 3);
    assert_eq!(v["memory"]["entries"]["nose"]["strength"], 0.25);
}

#[test]
fn eval_run_writes_reports_and_rejects_unknown_suites() {
    let dir = tempfile::tempdir().unwrap();
    let out = charedit(&["eval", "run", "zlpr", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("criterion  6 [PASS] zlpr"));
    assert!(dir.path().join("zlpr.csv").exists() && dir.path().join("zlpr.json").exists());
    let bad = charedit(&["eval", "run", "nope", "--out", dir.path().to_str().unwrap()]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown suite"));
}
