use std::path::Path;

use galaxyedit::clients::{Clients, Inpainter};
use galaxyedit::imaging::{load_rgb, Mask};
use galaxyedit::instructions::{generate, GenConfig};
use galaxyedit::pipeline::filters::FilterPolicy;
use galaxyedit::pipeline::run::run_pipeline;
use galaxyedit::pipeline::types::{parse_strategies, read_manifest, Strategy, Task};
use galaxyedit::pipeline::validate::validate_manifest;
use galaxyedit::synth::{synth_corpus, SynthConfig};
use galaxyedit::{Error, Result};

fn corpus(dir: &Path, n: usize) {
    synth_corpus(n, 7, dir, &SynthConfig::default()).unwrap();
}

#[test]
fn mock_run_is_valid_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("corpus");
    corpus(&images, 12);
    let policy = FilterPolicy::default();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let sa = run_pipeline(&images, &a, &policy, &Clients::all_mock(3), 3).unwrap();
    let sb = run_pipeline(&images, &b, &policy, &Clients::all_mock(3), 3).unwrap();
    assert_eq!(sa, sb);
    assert!(sa.samples > 10, "{sa:?}");
    assert!(sa.groups > 0, "{sa:?}");
    assert!(sa.rejected.get("keyword").copied().unwrap_or(0) + sa.rejected.get("score").copied().unwrap_or(0) > 0);
    assert_eq!(sa.quarantined, 0);
    let ma = std::fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.jsonl")).unwrap());

    let report = validate_manifest(&a.join("manifest.jsonl")).unwrap();
    assert!(report.ok(), "{:?}", report.errors);
    assert_eq!(report.pairs * 2, report.records);

    let records = read_manifest(&a.join("manifest.jsonl")).unwrap();
    for pair in records.chunks(2) {
        let (rm, add) = (&pair[0], &pair[1]);
        assert_eq!(rm.task, Task::Remove);
        assert_eq!(add.task, Task::Add);
        let bytes = |p: &str| std::fs::read(a.join(p)).unwrap();
        assert_eq!(bytes(&add.target_path), bytes(&rm.source_path));
        assert_eq!(bytes(&add.source_path), bytes(&rm.target_path));
        let src = load_rgb(&a.join(&rm.source_path)).unwrap();
        let tgt = load_rgb(&a.join(&rm.target_path)).unwrap();
        let mask = Mask::load_png(&a.join(&rm.mask_path)).unwrap();
        for (x, y, p) in src.enumerate_pixels() {
            if !mask.get(x as usize, y as usize) {
                assert_eq!(tgt.get_pixel(x, y), p);
            }
        }
    }
}

#[test]
fn instruction_generation_appends_all_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("corpus");
    corpus(&images, 10);
    let out = tmp.path().join("run");
    run_pipeline(&images, &out, &FilterPolicy::default(), &Clients::all_mock(1), 1).unwrap();
    let manifest = out.join("manifest.jsonl");
    let clients = Clients::all_mock(1);
    let cfg = GenConfig::new(parse_strategies("simple,attribute,spatial,multi").unwrap());
    let s1 = generate(&manifest, &cfg, clients.depth.as_ref(), clients.llm.as_ref()).unwrap();
    assert!(s1.added.get(&Strategy::Attribute).copied().unwrap_or(0) > 0, "{s1:?}");
    assert!(s1.added.get(&Strategy::Spatial).copied().unwrap_or(0) > 0, "{s1:?}");
    let once = std::fs::read(&manifest).unwrap();
    let s2 = generate(&manifest, &cfg, clients.depth.as_ref(), clients.llm.as_ref()).unwrap();
    assert!(s2.added.is_empty());
    assert_eq!(once, std::fs::read(&manifest).unwrap());

    let records = read_manifest(&manifest).unwrap();
    for r in &records {
        assert!(!r.instructions.is_empty());
        for i in &r.instructions {
            assert!(i.text.starts_with(r.task.name()), "{}", i.text);
            assert_eq!(i.text, i.text.to_lowercase());
        }
    }
    let spatial: Vec<&str> = records
        .iter()
        .flat_map(|r| r.instructions.iter())
        .filter(|i| i.strategy == Strategy::Spatial)
        .map(|i| i.text.as_str())
        .collect();
    assert!(spatial.iter().all(|t| [" to the left of ", " to the right of ", " above ", " below ", " in front of ", " behind "]
        .iter()
        .any(|p| t.contains(p))));
    assert!(validate_manifest(&manifest).unwrap().ok());
}

struct Flaky;

impl Inpainter for Flaky {
    fn inpaint(&self, _: &image::RgbImage, _: &Mask) -> Result<image::RgbImage> {
        Err(Error::Client {
            kind: "inpainter",
            message: "503 after retries".into(),
        })
    }
}

#[test]
fn inpainter_failures_are_quarantined() {
    let tmp = tempfile::tempdir().unwrap();
    let images = tmp.path().join("corpus");
    corpus(&images, 4);
    let mut clients = Clients::all_mock(0);
    clients.inpainter = Box::new(Flaky);
    let out = tmp.path().join("run");
    let s = run_pipeline(&images, &out, &FilterPolicy::default(), &clients, 0).unwrap();
    assert_eq!(s.samples, 0);
    assert!(s.quarantined > 0);
    let q = std::fs::read_to_string(out.join("quarantine.jsonl")).unwrap();
    assert_eq!(q.lines().count(), s.quarantined);
    assert!(q.lines().all(|l| l.contains("\"stage\":\"inpaint\"")));
}

#[test]
fn missing_blocklist_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let policy = FilterPolicy {
        blocklist_file: Some(tmp.path().join("nope.txt")),
        ..FilterPolicy::default()
    };
    let err = run_pipeline(tmp.path(), &tmp.path().join("o"), &policy, &Clients::all_mock(0), 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
