use std::path::Path;
use std::process::{Command, Output};

fn occtrack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occtrack"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

const TINY: &str = r#"{
  "seed": 11,
  "data": {"train_scenes": 4, "test_scenes": 2},
  "reid": {"hidden": 4, "lane_hidden": 3},
  "completion": {"hidden": 4, "lane_hidden": 3},
  "reid_schedule": {"epochs": 1, "batch_size": 32},
  "completion_schedule": {"epochs": 1, "batch_size": 32}
}"#;

#[test]
fn full_command_sequence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "run.json"];
        all.extend_from_slice(args);
        let o = occtrack(dir.path(), &all);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let g = run(&["generate"]);
    let v: serde_json::Value = serde_json::from_slice(&g.stdout).unwrap();
    assert_eq!(v["n_scenes"], 6);
    assert!(dir.path().join("data/scenes.jsonl").exists());
    for m in ["reid-motion", "reid-map", "completion"] {
        run(&["train", "--model", m]);
        assert!(dir.path().join(format!("checkpoints/{m}.json")).exists());
    }
    run(&["infer", "--out", "tracks.jsonl"]);
    let e = run(&["eval", "--pred", "tracks.jsonl", "--out", "eval.json"]);
    assert!(String::from_utf8_lossy(&e.stdout).contains("IDS"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert!(r["body"]["recall"].as_f64().unwrap() > 0.5);
    run(&["baseline", "--out", "base.json"]);
    run(&["eval", "--out", "bench.json"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // unknown subcommand and bad flag values are usage errors
    assert_eq!(occtrack(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(occtrack(dir.path(), &["train", "--model", "nope"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), r#"{"data": {"train_scenes": 0}}"#).unwrap();
    assert_eq!(occtrack(dir.path(), &["--config", "bad.json", "generate"]).status.code(), Some(2));
    std::fs::write(dir.path().join("broken.json"), "{").unwrap();
    assert_eq!(occtrack(dir.path(), &["--config", "broken.json", "generate"]).status.code(), Some(2));
    // missing scenes file is a runtime failure
    std::fs::write(dir.path().join("run.json"), TINY).unwrap();
    let o = occtrack(dir.path(), &["--config", "run.json", "train", "--model", "reid-map"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    assert_eq!(occtrack(dir.path(), &["--help"]).status.code(), Some(0));
}
