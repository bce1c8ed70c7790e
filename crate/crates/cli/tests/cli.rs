use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn gson(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gson")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_replay_is_identical() {
    let out = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("empty_corridor.json");
    let o = gson(&[
        "run",
        "--scenario",
        scenario.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("Success"));
    let log = out.path().join("empty_corridor_gson_oracle_4.jsonl");
    assert!(out.path().join("empty_corridor_gson_oracle_4.csv").exists());

    let o = gson(&["replay", "--log", log.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("identical"));

    let text = std::fs::read_to_string(&log).unwrap();
    let tampered = out.path().join("tampered.jsonl");
    std::fs::write(&tampered, text.replacen("\"seed\":4", "\"seed\":5", 1)).unwrap();
    let o = gson(&["replay", "--log", tampered.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("mismatch at line"));
}

#[test]
fn batch_writes_csvs_and_prints_aggregate() {
    let out = tempfile::tempdir().unwrap();
    let manifest = out.path().join("m.json");
    let body = format!(
        r#"{{"entries": [{{"scenario": "{}", "seeds": [1, 2], "stacks": ["baseline"]}}]}}"#,
        scenarios().join("empty_corridor.json").display()
    );
    std::fs::write(&manifest, body).unwrap();
    let results = out.path().join("results");
    let o = gson(&[
        "batch",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("archetype,"), "{text}");
    assert!(text.contains("2 episodes, 0 failed"));
    assert_eq!(std::fs::read_to_string(results.join("episodes.csv")).unwrap().lines().count(), 3);
    assert!(results.join("aggregate.csv").exists());
}

#[test]
fn bad_inputs_exit_with_failure() {
    let o = gson(&["run", "--scenario", "/nonexistent/scenario.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.json");
    std::fs::write(&manifest, r#"{"entries": []}"#).unwrap();
    let o = gson(&["batch", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let log = dir.path().join("garbage.jsonl");
    std::fs::write(&log, "not json\n").unwrap();
    let o = gson(&["replay", "--log", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = gson(&["run", "--scenario", "x.json", "--stack", "dwa"]);
    assert!(!o.status.success());
}
