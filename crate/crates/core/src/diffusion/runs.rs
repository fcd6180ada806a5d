//! Training and sampling driven by a pipeline manifest. There is no
//! pretrained base at this scale, so training first fits a base model on
//! the manifest targets, freezes it, then trains the adapter on top.

use std::io::Write as _;
use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{control_for, Conditioning, EditPair, PairDataset};
use super::sample::sample;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::text::{TextEmbedder, DEFAULT_VOCAB};
use super::train::{train, LoopConfig, OptimConfig};
use super::unet::UNetConfig;
use super::TrainableBase;
use crate::adapter::{checkpoint, AdapterAssembly, AdapterConfig, FusionMode};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{load_rgb, save_rgb};
use crate::pipeline::types::{read_manifest, write_atomic, ManifestRecord};

pub const TRAIN_CONFIG_FILE: &str = "train.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const BASE_LOG_FILE: &str = "base_log.csv";
pub const ADAPTER_LOG_FILE: &str = "adapter_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Images are resized to `size × size` for training.
    pub size: usize,
    pub conditioning: Conditioning,
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub base_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Seed of the hashed-token embedding table.
    pub text_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            size: 32,
            conditioning: Conditioning::Image,
            unet: UNetConfig::default(),
            adapter: AdapterConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            base_steps: 200,
            steps: 200,
            batch_size: 8,
            seed: 0,
            text_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.adapter.validate()?;
        if self.size < 8 || self.size % self.unet.patch != 0 {
            return Err(Error::config(format!("train size {} must be >= 8 and a multiple of the patch", self.size)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("train steps and batch_size must be positive"));
        }
        self.optim.validate()?;
        NoiseSchedule::from_config(&self.schedule)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pairs: usize,
    pub mode: FusionMode,
    pub base_initial_loss: f64,
    pub base_final_loss: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub fusion_weights: Vec<f64>,
    pub base_sha256: String,
}

/// HWC pixels in `[0, 1]` at `size × size`.
fn resized(img: &RgbImage, size: usize) -> Vec<f32> {
    let small = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
    small.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect()
}

/// First instruction of a record, or a bare one built from its label.
fn instruction_of(r: &ManifestRecord) -> String {
    r.instructions
        .first()
        .map_or_else(|| format!("{} the {}", r.task.name(), r.object.label), |i| i.text.clone())
}

/// One training pair per (record, instruction).
pub fn manifest_pairs(manifest: &Path, cfg: &TrainConfig) -> Result<Vec<EditPair>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::new();
    for r in read_manifest(manifest)? {
        let source = resized(&load_rgb(&base.join(&r.source_path))?, cfg.size);
        let target = resized(&load_rgb(&base.join(&r.target_path))?, cfg.size);
        let control = control_for(cfg.conditioning, &source, cfg.size, &mut rng)?;
        let texts: Vec<String> = if r.instructions.is_empty() {
            vec![instruction_of(&r)]
        } else {
            r.instructions.iter().map(|i| i.text.clone()).collect()
        };
        for instruction in texts {
            pairs.push(EditPair {
                source: source.clone(),
                target: target.clone(),
                control: control.clone(),
                instruction,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!("{} has no samples to train on", manifest.display())));
    }
    Ok(pairs)
}

fn csv_log(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).at(path)?))
}

/// Trains base then adapter and writes a checkpoint plus logs into `out`.
pub fn train_on_manifest(manifest: &Path, cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).at(out)?;
    let device = Device::Cpu;
    let embedder = TextEmbedder::new(DEFAULT_VOCAB, cfg.unet.text_dim, cfg.text_seed)?;
    let data = PairDataset::from_pairs(&manifest_pairs(manifest, cfg)?, cfg.size, &embedder, &device)?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;

    let base = TrainableBase::new(&cfg.unet, cfg.seed, &device)?;
    let mut log = csv_log(&out.join(BASE_LOG_FILE))?;
    let base_loop = LoopConfig {
        steps: cfg.base_steps,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let base_losses = train(&base, &data, &sched, &cfg.optim, &base_loop, Some(&mut log))?;
    log.flush().at(out.join(BASE_LOG_FILE))?;

    let adapter_cfg = AdapterConfig {
        control_channels: data.control_channels(),
        ..cfg.adapter.clone()
    };
    let asm = AdapterAssembly::new(&cfg.unet, base.freeze()?, &adapter_cfg, cfg.seed, &device)?;
    let mut log = csv_log(&out.join(ADAPTER_LOG_FILE))?;
    let adapter_loop = LoopConfig {
        seed: cfg.seed.wrapping_add(1),
        steps: cfg.steps,
        ..base_loop
    };
    let losses = train(&asm, &data, &sched, &cfg.optim, &adapter_loop, Some(&mut log))?;
    log.flush().at(out.join(ADAPTER_LOG_FILE))?;

    let saved = checkpoint::save(&asm, out)?;
    write_atomic(&out.join(TRAIN_CONFIG_FILE), &serde_json::to_vec_pretty(cfg)?)?;
    let first = |v: &[f64]| v.first().copied().unwrap_or(f64::NAN);
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    let summary = TrainSummary {
        pairs: data.len(),
        mode: asm.mode(),
        base_initial_loss: first(&base_losses),
        base_final_loss: last(&base_losses),
        initial_loss: first(&losses),
        final_loss: last(&losses),
        fusion_weights: saved.fusion_weights,
        base_sha256: saved.base_sha256,
    };
    write_atomic(&out.join(TRAIN_SUMMARY_FILE), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// `[C, H, W]` in `[-1, 1]` to an RGB image.
fn to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape("to_image", "channels", 3, c));
    }
    let v: Vec<f32> = t.flatten_all()?.to_vec1()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let f = v[ch * h * w + y as usize * w + x as usize];
            ((f + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Writes `<out>/<sample_id>.png` for every record, resized to the record's
/// target size. Records are sampled in chunks of `batch`; chunk `k` uses
/// seed `seed + k`.
pub fn sample_manifest(checkpoint_dir: &Path, manifest: &Path, out: &Path, steps: usize, batch: usize, seed: u64) -> Result<usize> {
    let path = checkpoint_dir.join(TRAIN_CONFIG_FILE);
    let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(&path).at(&path)?)?;
    let device = Device::Cpu;
    let asm = checkpoint::load(checkpoint_dir, &device)?;
    let embedder = TextEmbedder::new(DEFAULT_VOCAB, cfg.unet.text_dim, cfg.text_seed)?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    std::fs::create_dir_all(out).at(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (k, chunk) in records.chunks(batch.max(1)).enumerate() {
        let mut pairs = Vec::with_capacity(chunk.len());
        let mut sizes = Vec::with_capacity(chunk.len());
        for r in chunk {
            let src = load_rgb(&base.join(&r.source_path))?;
            sizes.push(src.dimensions());
            let source = resized(&src, cfg.size);
            pairs.push(EditPair {
                control: control_for(cfg.conditioning, &source, cfg.size, &mut rng)?,
                target: source.clone(),
                source,
                instruction: instruction_of(r),
            });
        }
        let data = PairDataset::from_pairs(&pairs, cfg.size, &embedder, &device)?;
        let x = sample(&asm, &data.control, &data.text, &sched, data.target.dims(), steps, seed.wrapping_add(k as u64))?;
        for (i, r) in chunk.iter().enumerate() {
            let img = to_image(&x.get(i)?)?;
            let (w, h) = sizes[i];
            let img = image::imageops::resize(&img, w, h, FilterType::Triangle);
            save_rgb(&img, &out.join(format!("{}.png", r.sample_id)))?;
        }
    }
    Ok(records.len())
}
