use std::path::Path;
use std::process::{Command, Output};

use galaxyedit::pipeline::types::read_manifest;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_galaxyedit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn galaxyedit")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dataset_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("images");
    let out = tmp.path().join("pairs");
    let manifest = out.join("manifest.jsonl");

    ok(&["synth", "--n", "5", "--seed", "2", "--out", s(&images)]);
    let pngs = std::fs::read_dir(&images)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 5);

    let summary: serde_json::Value = serde_json::from_str(&ok(&["pipeline", "run", "--images", s(&images), "--out", s(&out), "--seed", "2"])).unwrap();
    assert!(summary["samples"].as_u64().unwrap() > 0, "{summary}");
    ok(&["instructions", "gen", "--manifest", s(&manifest), "--strategies", "simple,spatial"]);
    let report: serde_json::Value = serde_json::from_str(&ok(&["pipeline", "validate", "--manifest", s(&manifest)])).unwrap();
    assert_eq!(report["errors"].as_array().unwrap().len(), 0);

    // Targets as predictions score a pixel distance of zero.
    let pred = tmp.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    for r in read_manifest(&manifest).unwrap() {
        std::fs::copy(out.join(&r.target_path), pred.join(format!("{}.png", r.sample_id))).unwrap();
    }
    let eval_dir = tmp.path().join("eval");
    let metrics: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "run", "--manifest", s(&manifest), "--pred", s(&pred), "--out", s(&eval_dir)])).unwrap();
    assert_eq!(metrics["metrics"]["l2"].as_f64(), Some(0.0));
    assert!(eval_dir.join("report.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let images = tmp.path().join("images");
    std::fs::create_dir_all(&images).unwrap();

    for args in [
        vec!["frobnicate"],
        vec!["synth", "--out", "x"],
        vec!["synth", "--n", "0", "--out", "x"],
        vec!["pipeline", "run", "--images", s(&images), "--out", "x", "--policy", s(&missing)],
        vec!["e2e", "--config", s(&bad), "--run-dir", "x"],
        vec!["experiment", "--config", s(&bad)],
        vec!["instructions", "gen", "--manifest", "m.jsonl", "--depth-client", "carrier-pigeon"],
    ] {
        assert_eq!(code(&run(&args)), 2, "{args:?}");
    }

    let torn = tmp.path().join("torn.jsonl");
    std::fs::write(&torn, "{\"sample_id\": 1\n").unwrap();
    for args in [
        vec!["pipeline", "validate", "--manifest", s(&torn)],
        vec!["sample", "--checkpoint", s(&images), "--manifest", s(&torn), "--out", "x"],
    ] {
        let out = run(&args);
        assert_eq!(code(&out), 3, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    }
}
