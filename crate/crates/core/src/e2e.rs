//! End-to-end run: synth → pipeline → instructions → train → sample →
//! evaluate, each stage writing into its own directory under the run
//! directory.
//!
//! A stage is keyed by its name, its config section and the digests of the
//! stages it reads. After it runs, `<stage>/.stage.json` records the key
//! and a digest of everything the stage wrote. On a rerun, a stage whose
//! key matches and whose files still hash to the recorded digest is
//! skipped; anything else is deleted and rebuilt.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::clients::Clients;
use crate::config::RunConfig;
use crate::diffusion::runs::{sample_manifest, train_on_manifest};
use crate::error::{Error, IoContext, Result};
use crate::instructions::{generate, GenConfig};
use crate::metrics::report::{evaluate_manifest, MetricReport, Providers};
use crate::pipeline::run::{run_pipeline, PipelineSummary};
use crate::pipeline::types::write_atomic;
use crate::pipeline::validate::validate_manifest;
use crate::synth::synth_corpus;

pub const STAMP_FILE: &str = ".stage.json";
pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "run.log";
pub const STAGES: [&str; 6] = ["synth", "pipeline", "instructions", "train", "sample", "evaluate"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stamp {
    stage: String,
    key: String,
    digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub status: StageStatus,
    pub key: String,
    pub digest: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eReport {
    pub version: String,
    pub config_hash: String,
    pub stages: Vec<StageOutcome>,
    pub samples: usize,
    pub quarantined: usize,
    pub validation_errors: usize,
    pub seconds: f64,
}

impl E2eReport {
    pub fn stage(&self, name: &str) -> Option<&StageOutcome> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// Names of the stages that actually ran.
    pub fn ran(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|s| s.status == StageStatus::Ran)
            .map(|s| s.stage.as_str())
            .collect()
    }
}

fn files_under(dir: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir.join(rel))
        .at(dir.join(rel))?
        .collect::<std::io::Result<Vec<_>>>()
        .at(dir.join(rel))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let r = rel.join(e.file_name());
        if e.file_type().at(e.path())?.is_dir() {
            files_under(dir, &r, out)?;
        } else if r != Path::new(STAMP_FILE) {
            out.push(r);
        }
    }
    Ok(())
}

/// SHA-256 over every file's relative path and bytes, in path order.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    files_under(dir, Path::new(""), &mut files)?;
    let mut h = Sha256::new();
    for f in files {
        let bytes = std::fs::read(dir.join(&f)).at(dir.join(&f))?;
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn stage_key(stage: &str, config: &serde_json::Value, inputs: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config)?);
    for i in inputs {
        h.update([0]);
        h.update(i.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn read_stamp(dir: &Path) -> Option<Stamp> {
    serde_json::from_slice(&std::fs::read(dir.join(STAMP_FILE)).ok()?).ok()
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    let mut files = Vec::new();
    files_under(from, Path::new(""), &mut files)?;
    for f in files {
        let dst = to.join(&f);
        if let Some(parent) = dst.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        std::fs::copy(from.join(&f), &dst).at(&dst)?;
    }
    Ok(())
}

struct Runner {
    root: PathBuf,
    log: std::fs::File,
    outcomes: Vec<StageOutcome>,
    quarantined: usize,
}

impl Runner {
    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn digest_of(&self, stage: &str) -> &str {
        &self.outcomes.iter().find(|o| o.stage == stage).expect("stage ran earlier").digest
    }

    fn note(&mut self, line: &str) -> Result<()> {
        log::info!("{line}");
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis());
        writeln!(self.log, "{stamp} {line}").at(self.root.join(LOG_FILE))
    }

    fn fail(&self, stage: &str, e: Error) -> Error {
        match e {
            Error::Config(_) => e,
            e => Error::Stage {
                stage: stage.to_string(),
                message: format!("{e} ({} quarantined so far)", self.quarantined),
            },
        }
    }

    fn stage(
        &mut self,
        name: &str,
        config: serde_json::Value,
        inputs: &[&str],
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let digests: Vec<String> = inputs.iter().map(|i| self.digest_of(i).to_string()).collect();
        let digests: Vec<&str> = digests.iter().map(String::as_str).collect();
        let key = stage_key(name, &config, &digests)?;
        let dir = self.dir(name);
        let start = Instant::now();
        if let Some(stamp) = read_stamp(&dir) {
            if stamp.key == key && dir_digest(&dir).ok().as_deref() == Some(stamp.digest.as_str()) {
                self.note(&format!("stage={name} status=cached key={}", &key[..12]))?;
                self.outcomes.push(StageOutcome {
                    stage: name.to_string(),
                    status: StageStatus::Cached,
                    key,
                    digest: stamp.digest,
                    seconds: start.elapsed().as_secs_f64(),
                });
                return Ok(());
            }
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir).at(&dir)?;
        }
        std::fs::create_dir_all(&dir).at(&dir)?;
        self.note(&format!("stage={name} status=start key={}", &key[..12]))?;
        if let Err(e) = body(&dir) {
            let e = self.fail(name, e);
            self.note(&format!("stage={name} status=failed error={e}"))?;
            return Err(e);
        }
        let digest = dir_digest(&dir)?;
        let stamp = Stamp {
            stage: name.to_string(),
            key: key.clone(),
            digest: digest.clone(),
        };
        write_atomic(&dir.join(STAMP_FILE), &serde_json::to_vec_pretty(&stamp)?)?;
        let seconds = start.elapsed().as_secs_f64();
        self.note(&format!("stage={name} status=ran seconds={seconds:.1} digest={}", &digest[..12]))?;
        self.outcomes.push(StageOutcome {
            stage: name.to_string(),
            status: StageStatus::Ran,
            key,
            digest,
            seconds,
        });
        Ok(())
    }
}

fn manifest_in(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}

/// Runs or resumes every stage under `run_dir`.
pub fn run_e2e(cfg: &RunConfig, run_dir: &Path) -> Result<E2eReport> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(run_dir).at(run_dir)?;
    let root = run_dir.canonicalize().at(run_dir)?;
    let config_hash = cfg.hash()?;
    let log_path = root.join(LOG_FILE);
    let log = std::fs::OpenOptions::new().create(true).append(true).open(&log_path).at(&log_path)?;
    let mut r = Runner {
        root: root.clone(),
        log,
        outcomes: Vec::new(),
        quarantined: 0,
    };
    r.note(&format!("run start config={config_hash}"))?;
    write_atomic(&root.join("config.json"), &serde_json::to_vec_pretty(cfg)?)?;

    let seed = cfg.seed;
    r.stage("synth", json!({"images": cfg.images, "seed": seed, "synth": cfg.synth}), &[], |dir| {
        synth_corpus(cfg.images, seed, dir, &cfg.synth).map(|_| ())
    })?;

    let blocklist = match &cfg.policy.blocklist_file {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config(format!("blocklist {}: {e}", p.display())))?,
        None => String::new(),
    };
    let images = r.dir("synth");
    r.stage(
        "pipeline",
        json!({"policy": cfg.policy, "blocklist": blocklist, "clients": cfg.clients, "seed": seed}),
        &["synth"],
        |dir| {
            let clients = Clients::from_config(&cfg.clients, seed)?;
            let s = run_pipeline(&images, dir, &cfg.policy, &clients, seed)?;
            if s.samples == 0 {
                return Err(Error::invalid(format!(
                    "no samples from {} images ({} quarantined)",
                    s.images, s.quarantined
                )));
            }
            Ok(())
        },
    )?;
    let summary: PipelineSummary = {
        let p = r.dir("pipeline").join("summary.json");
        serde_json::from_slice(&std::fs::read(&p).at(&p)?)?
    };
    r.quarantined = summary.quarantined;

    let pipeline_dir = r.dir("pipeline");
    r.stage(
        "instructions",
        json!({"instructions": cfg.instructions, "depth": cfg.clients.depth, "llm": cfg.clients.llm, "seed": seed}),
        &["pipeline"],
        |dir| {
            copy_tree(&pipeline_dir, dir)?;
            let clients = Clients::from_config(&cfg.clients, seed)?;
            let gen = GenConfig {
                margin: cfg.instructions.margin,
                ..GenConfig::new(cfg.instructions.strategies.iter().copied().collect())
            };
            generate(&manifest_in(dir), &gen, clients.depth.as_ref(), clients.llm.as_ref())?;
            let report = validate_manifest(&manifest_in(dir))?;
            write_atomic(&dir.join("validation.json"), &serde_json::to_vec_pretty(&report)?)?;
            if !report.ok() {
                return Err(Error::invalid(format!(
                    "manifest has {} schema violations, first: {}",
                    report.errors.len(),
                    report.errors[0]
                )));
            }
            Ok(())
        },
    )?;

    let manifest = manifest_in(&r.dir("instructions"));
    r.stage("train", json!({"train": cfg.train}), &["instructions"], |dir| {
        train_on_manifest(&manifest, &cfg.train, dir).map(|_| ())
    })?;

    let ckpt = r.dir("train");
    r.stage("sample", json!({"sample": cfg.sample, "seed": seed}), &["instructions", "train"], |dir| {
        sample_manifest(&ckpt, &manifest, dir, cfg.sample.steps, cfg.sample.batch, seed).map(|_| ())
    })?;

    let preds = r.dir("sample");
    r.stage("evaluate", json!({"providers": cfg.providers, "seed": seed}), &["instructions", "sample"], |dir| {
        let providers = Providers::from_config(&cfg.providers, seed)?;
        let report = evaluate_manifest(&manifest, &preds, &providers)?;
        report.write(dir)
    })?;

    let validation: crate::pipeline::validate::ValidationReport = {
        let p = r.dir("instructions").join("validation.json");
        serde_json::from_slice(&std::fs::read(&p).at(&p)?)?
    };
    let report = E2eReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash,
        stages: r.outcomes.clone(),
        samples: validation.records,
        quarantined: summary.quarantined,
        validation_errors: validation.errors.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_atomic(&root.join(RUN_FILE), &serde_json::to_vec_pretty(&report)?)?;
    r.note(&format!("run done seconds={:.1} ran={:?}", report.seconds, report.ran()))?;
    Ok(report)
}

/// The evaluation report of a finished run.
pub fn read_metrics(run_dir: &Path) -> Result<MetricReport> {
    let p = run_dir.join("evaluate").join(crate::metrics::report::REPORT_FILE);
    Ok(serde_json::from_slice(&std::fs::read(&p).at(&p)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_sees_names_and_bytes_but_not_the_stamp() {
        let tmp = tempfile::tempdir().unwrap();
        let d = tmp.path();
        std::fs::create_dir_all(d.join("sub")).unwrap();
        std::fs::write(d.join("a"), b"1").unwrap();
        std::fs::write(d.join("sub/b"), b"2").unwrap();
        let base = dir_digest(d).unwrap();
        std::fs::write(d.join(STAMP_FILE), b"{}").unwrap();
        assert_eq!(dir_digest(d).unwrap(), base);
        std::fs::write(d.join("sub/b"), b"3").unwrap();
        let changed = dir_digest(d).unwrap();
        assert_ne!(changed, base);
        std::fs::write(d.join("sub/b"), b"2").unwrap();
        std::fs::rename(d.join("a"), d.join("c")).unwrap();
        assert_ne!(dir_digest(d).unwrap(), base);
    }

    #[test]
    fn keys_depend_on_inputs() {
        let c = json!({"x": 1});
        let a = stage_key("s", &c, &["d1"]).unwrap();
        assert_ne!(a, stage_key("s", &c, &["d2"]).unwrap());
        assert_ne!(a, stage_key("t", &c, &["d1"]).unwrap());
        assert_ne!(a, stage_key("s", &json!({"x": 2}), &["d1"]).unwrap());
        assert_eq!(a, stage_key("s", &c, &["d1"]).unwrap());
    }
}
