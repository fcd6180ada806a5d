use std::path::Path;

use galaxyedit::config::RunConfig;
use galaxyedit::e2e::{read_metrics, run_e2e, StageStatus, STAGES};
use galaxyedit::Error;

const TINY: &str = r#"
seed = 3
images = 4

[train]
size = 16
base_steps = 3
steps = 3
batch_size = 2

[train.unet]
widths = [4, 8]
time_dim = 8
emb_dim = 8

[train.adapter]
control_widths = [4, 4]
embedder_hidden = 4

[sample]
steps = 2
batch = 8
"#;

fn tiny(extra: &str) -> RunConfig {
    RunConfig::from_toml(&format!("{TINY}\n{extra}"), Path::new("run.toml")).unwrap()
}

fn tiny_with(train_steps: usize) -> RunConfig {
    let mut cfg = tiny("");
    cfg.train.steps = train_steps;
    cfg
}

#[test]
fn stages_are_cached_and_rerun_on_change() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = tiny("");

    let first = run_e2e(&cfg, dir).unwrap();
    assert_eq!(first.ran(), STAGES.to_vec());
    assert_eq!(first.validation_errors, 0);
    assert!(first.samples > 0);
    assert!(read_metrics(dir).unwrap().n_samples > 0);

    let second = run_e2e(&cfg, dir).unwrap();
    assert!(second.ran().is_empty(), "{:?}", second.ran());

    // Sampling is deterministic, so evaluate sees the same bytes again.
    std::fs::remove_dir_all(dir.join("sample")).unwrap();
    let third = run_e2e(&cfg, dir).unwrap();
    assert_eq!(third.ran(), vec!["sample"]);
    assert_eq!(third.stage("sample").unwrap().digest, first.stage("sample").unwrap().digest);

    let changed = run_e2e(&tiny_with(4), dir).unwrap();
    assert_eq!(changed.ran(), vec!["train", "sample", "evaluate"]);
    for s in ["synth", "pipeline", "instructions"] {
        assert_eq!(changed.stage(s).unwrap().status, StageStatus::Cached, "{s}");
    }

    // A stage whose files were tampered with is rebuilt.
    std::fs::write(dir.join("instructions").join("manifest.jsonl"), b"{}\n").unwrap();
    let repaired = run_e2e(&tiny_with(4), dir).unwrap();
    assert_eq!(repaired.stage("instructions").unwrap().status, StageStatus::Ran);
    assert_eq!(repaired.stage("instructions").unwrap().digest, changed.stage("instructions").unwrap().digest);
    assert_eq!(repaired.stage("train").unwrap().status, StageStatus::Cached);

    let log = std::fs::read_to_string(dir.join("run.log")).unwrap();
    assert_eq!(log.matches("run done").count(), 5);
}

#[test]
fn same_seed_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny("");
    let a = run_e2e(&cfg, &tmp.path().join("a")).unwrap();
    let b = run_e2e(&cfg, &tmp.path().join("b")).unwrap();
    let manifest = |d: &str| std::fs::read(tmp.path().join(d).join("instructions/manifest.jsonl")).unwrap();
    assert_eq!(manifest("a"), manifest("b"));
    // Scene files record absolute image paths, so only stages without
    // them are compared across run directories.
    for s in ["synth", "train", "sample", "evaluate"] {
        assert_eq!(a.stage(s).unwrap().digest, b.stage(s).unwrap().digest, "{s}");
    }
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn failures_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let broken = tiny("[clients.inpainter]\nendpoint = \"http://127.0.0.1:9\"\ntimeout_ms = 200\nmax_retries = 0");
    match run_e2e(&broken, tmp.path()) {
        Err(Error::Stage { stage, message }) => {
            assert_eq!(stage, "pipeline");
            assert!(message.contains("quarantined"), "{message}");
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
    assert!(tmp.path().join("synth/.stage.json").exists());
    assert!(!tmp.path().join("pipeline/.stage.json").exists());

    let mut bad = tiny("");
    bad.sample.steps = 0;
    assert!(matches!(run_e2e(&bad, &tmp.path().join("x")), Err(Error::Config(_))));
    assert!(matches!(
        RunConfig::from_toml("[train]\nsize = 17", Path::new("run.toml")),
        Err(Error::Config(_))
    ));
}
