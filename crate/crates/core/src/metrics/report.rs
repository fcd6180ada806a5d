//! Manifest-level evaluation: per-sample pixel and embedding metrics,
//! aggregated into a JSON report and a per-sample CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fid::{frechet_from_accumulators, GaussianAccumulator};
use super::{cosine, pixel_distance};
use crate::clients::config::{ClientSpec, ProvidersConfig};
use crate::clients::http::HttpClient;
use crate::clients::mock::MockEmbedder;
use crate::clients::{ClientKind, EmbedItem, Embedder};
use crate::error::{Error, IoContext, Result};
use crate::imaging::load_rgb;
use crate::pipeline::types::{write_atomic, ManifestRecord};

const CLIP_T_NOTE: &str =
    "clip_t is the raw cosine between the prediction and its instruction; lower is better for remove, higher for add";
const PIXEL_NOTE: &str = "l1 and l2 are computed on pixels scaled to [0,1]";
pub const REPORT_FILE: &str = "report.json";
pub const SAMPLES_FILE: &str = "samples.csv";

const FID_NOTE: &str = "fid is computed in the clip provider's embedding space, not Inception-v3";

/// Embedding providers: `clip` embeds images and text, `dino` images.
pub struct Providers {
    pub clip: Box<dyn Embedder>,
    pub dino: Box<dyn Embedder>,
}

impl Providers {
    pub fn mock(seed: u64) -> Self {
        Self {
            clip: Box::new(MockEmbedder::clip(seed)),
            dino: Box::new(MockEmbedder::dino(seed)),
        }
    }

    pub fn from_config(cfg: &ProvidersConfig, seed: u64) -> Result<Self> {
        let build = |spec: &ClientSpec, mock: MockEmbedder| -> Result<Box<dyn Embedder>> {
            Ok(match spec {
                ClientSpec::Mock => Box::new(mock),
                ClientSpec::Http(c) => Box::new(HttpClient::new(ClientKind::Embedder, c.clone())?),
            })
        };
        Ok(Self {
            clip: build(&cfg.clip, MockEmbedder::clip(seed))?,
            dino: build(&cfg.dino, MockEmbedder::dino(seed))?,
        })
    }

    pub fn provider_id(&self) -> String {
        format!("clip={};dino={}", self.clip.provider_id(), self.dino.provider_id())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub clip_t: Option<f64>,
    pub clip_i: Option<f64>,
    pub dino: Option<f64>,
    pub fid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub task: String,
    pub l1: f64,
    pub l2: f64,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub provider_id: String,
    pub n_samples: usize,
    pub metrics: Metrics,
    /// Same metrics restricted to each task.
    pub by_task: BTreeMap<String, Metrics>,
    pub missing: Vec<String>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Writes `report.json` and `samples.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join(REPORT_FILE), &json)?;
        let mut csv = String::from("sample_id,task,l1,l2,clip_t,clip_i,dino\n");
        for s in &self.samples {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.sample_id, s.task, s.l1, s.l2, s.clip_t, s.clip_i, s.dino
            ));
        }
        write_atomic(&dir.join(SAMPLES_FILE), csv.as_bytes())
    }
}

struct Row {
    m: SampleMetrics,
    target_embed: Vec<f64>,
    pred_embed: Vec<f64>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| f64::from(*x)).collect()
}

fn score(rec: &ManifestRecord, base: &Path, pred: &Path, p: &Providers) -> Result<Row> {
    let target = load_rgb(&base.join(&rec.target_path))?;
    let prediction = load_rgb(pred)?;
    let (l1, l2) = pixel_distance(&prediction, &target)?;
    let instruction = rec
        .instructions
        .first()
        .ok_or_else(|| Error::invalid(format!("{}: no instruction", rec.sample_id)))?;
    let pred_clip = p.clip.embed(EmbedItem::Image(&prediction))?;
    let target_clip = p.clip.embed(EmbedItem::Image(&target))?;
    let text = p.clip.embed(EmbedItem::Text(&instruction.text))?;
    let pred_dino = p.dino.embed(EmbedItem::Image(&prediction))?;
    let target_dino = p.dino.embed(EmbedItem::Image(&target))?;
    Ok(Row {
        m: SampleMetrics {
            sample_id: rec.sample_id.clone(),
            task: rec.task.name().to_string(),
            l1,
            l2,
            clip_t: cosine(&pred_clip, &text)?,
            clip_i: cosine(&pred_clip, &target_clip)?,
            dino: cosine(&pred_dino, &target_dino)?,
        },
        target_embed: to_f64(&target_clip),
        pred_embed: to_f64(&pred_clip),
    })
}

fn aggregate(rows: &[&Row], notes: &mut Vec<String>, scope: &str) -> Result<Metrics> {
    if rows.is_empty() {
        return Ok(Metrics::default());
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| Some(rows.iter().map(|r| f(&r.m)).sum::<f64>() / n);
    let fid = if rows.len() >= 2 {
        let dim = rows[0].target_embed.len();
        let (mut x, mut y) = (GaussianAccumulator::new(dim), GaussianAccumulator::new(dim));
        for r in rows {
            x.push(&r.target_embed)?;
            y.push(&r.pred_embed)?;
        }
        Some(frechet_from_accumulators(&x, &y)?)
    } else {
        notes.push(format!("{scope}: fid needs at least 2 samples"));
        None
    };
    Ok(Metrics {
        l1: mean(|m| m.l1),
        l2: mean(|m| m.l2),
        clip_t: mean(|m| m.clip_t),
        clip_i: mean(|m| m.clip_i),
        dino: mean(|m| m.dino),
        fid,
    })
}

/// Scores `<predictions_dir>/<sample_id>.png` against each record's target.
/// Samples are processed in `sample_id` order, so the report does not
/// depend on manifest order. Missing predictions are listed and skipped.
pub fn evaluate_manifest(manifest: &Path, predictions_dir: &Path, providers: &Providers) -> Result<MetricReport> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = crate::pipeline::types::read_manifest(manifest)?;
    records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(r.sample_id.as_str()) {
            return Err(Error::invalid(format!("duplicate sample_id {}", r.sample_id)));
        }
    }
    let (present, missing): (Vec<_>, Vec<_>) = records
        .iter()
        .map(|r| (r, predictions_dir.join(format!("{}.png", r.sample_id))))
        .partition(|(_, p)| p.is_file());
    let rows: Vec<Row> = present
        .par_iter()
        .map(|(r, p)| score(r, base, p, providers))
        .collect::<Result<_>>()?;

    let mut notes = vec![PIXEL_NOTE.to_string(), CLIP_T_NOTE.to_string(), FID_NOTE.to_string()];
    let all: Vec<&Row> = rows.iter().collect();
    let metrics = aggregate(&all, &mut notes, "all")?;
    let mut by_task = BTreeMap::new();
    let tasks: BTreeSet<&str> = rows.iter().map(|r| r.m.task.as_str()).collect();
    for t in tasks {
        let subset: Vec<&Row> = rows.iter().filter(|r| r.m.task == t).collect();
        by_task.insert(t.to_string(), aggregate(&subset, &mut notes, t)?);
    }
    Ok(MetricReport {
        provider_id: providers.provider_id(),
        n_samples: rows.len(),
        metrics,
        by_task,
        missing: missing.into_iter().map(|(r, _)| r.sample_id.clone()).collect(),
        notes,
        samples: rows.into_iter().map(|r| r.m).collect(),
    })
}
