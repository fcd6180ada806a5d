//! Conditioning efficacy on the micro-dataset: a text-conditioned base is
//! pretrained once, then adapters in each fusion mode are trained on top
//! of it per seed and compared with the base sampler by held-out L2.

use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::dataset::{micro_dataset, MicroDatasetConfig, PairDataset};
use super::sample::sample;
use super::schedule::{NoiseSchedule, ScheduleConfig};
use super::text::{TextEmbedder, DEFAULT_TEXT_DIM, DEFAULT_VOCAB};
use super::train::{train, LoopConfig, OptimConfig};
use super::unet::UNetConfig;
use super::{EpsModel, TrainableBase};
use crate::adapter::{AdapterAssembly, AdapterConfig, FusionMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: MicroDatasetConfig,
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub base_steps: usize,
    pub adapter_steps: usize,
    pub batch_size: usize,
    pub sample_steps: usize,
    pub base_seed: u64,
    pub seeds: Vec<u64>,
    /// Criterion (a): adapter L2 must be below this fraction of the base's.
    pub base_ratio: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: MicroDatasetConfig::default(),
            unet: UNetConfig::default(),
            adapter: AdapterConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            base_steps: 1500,
            adapter_steps: 2000,
            batch_size: 8,
            sample_steps: 20,
            base_seed: 0,
            seeds: vec![1, 2, 3],
            base_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base_l2: f64,
    pub linear_l2: f64,
    pub volterra_l2: f64,
    pub linear_final_loss: f64,
    pub volterra_final_loss: f64,
    pub beats_base: bool,
    pub beats_linear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub base_final_loss: f64,
    pub seeds: Vec<SeedResult>,
    pub majority_beats_base: bool,
    pub majority_beats_linear: bool,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.majority_beats_base && self.majority_beats_linear
    }
}

/// Mean squared error against the held-out targets, both mapped to `[0, 1]`.
pub fn heldout_l2<M: EpsModel + ?Sized>(
    model: &M,
    data: &PairDataset,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let out = sample(model, &data.control, &data.text, sched, data.target.dims(), steps, seed)?;
    let diff = ((out - &data.target)? * 0.5)?;
    Ok(f64::from(diff.sqr()?.mean_all()?.to_scalar::<f32>()?))
}

fn tail_mean(losses: &[f64]) -> f64 {
    let k = losses.len().min(100).max(1);
    losses[losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
}

/// Pretrains the text-conditioned base on targets.
pub fn pretrain_base(
    cfg: &ExperimentConfig,
    train_set: &PairDataset,
    sched: &NoiseSchedule,
    device: &Device,
) -> Result<(TrainableBase, f64)> {
    let base = TrainableBase::new(&cfg.unet, cfg.base_seed, device)?;
    let loop_cfg = LoopConfig {
        steps: cfg.base_steps,
        batch_size: cfg.batch_size,
        seed: cfg.base_seed,
    };
    let losses = train(&base, train_set, sched, &cfg.optim, &loop_cfg, None)?;
    Ok((base, tail_mean(&losses)))
}

pub fn train_adapter(
    cfg: &ExperimentConfig,
    base: &std::collections::HashMap<String, Tensor>,
    mode: FusionMode,
    seed: u64,
    train_set: &PairDataset,
    sched: &NoiseSchedule,
    device: &Device,
) -> Result<(AdapterAssembly, f64)> {
    let adapter_cfg = AdapterConfig {
        mode,
        control_channels: train_set.control_channels(),
        ..cfg.adapter.clone()
    };
    let asm = AdapterAssembly::new(&cfg.unet, base.clone(), &adapter_cfg, seed, device)?;
    let loop_cfg = LoopConfig {
        steps: cfg.adapter_steps,
        batch_size: cfg.batch_size,
        seed,
    };
    let losses = train(&asm, train_set, sched, &cfg.optim, &loop_cfg, None)?;
    Ok((asm, tail_mean(&losses)))
}

/// Runs the full comparison. `progress` receives one line per finished arm.
pub fn run_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("experiment needs at least one seed"));
    }
    cfg.optim.validate()?;
    let start = Instant::now();
    let device = Device::Cpu;
    let embedder = TextEmbedder::new(DEFAULT_VOCAB, DEFAULT_TEXT_DIM, cfg.dataset.seed)?;
    let (train_set, heldout) = micro_dataset(&cfg.dataset, &embedder, &device)?;
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let (base, base_final_loss) = pretrain_base(cfg, &train_set, &sched, &device)?;
    let frozen = base.freeze()?;
    progress(&format!(
        "base pretrained: loss {base_final_loss:.4} ({:.0}s)",
        start.elapsed().as_secs_f64()
    ));
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let base_l2 = heldout_l2(&base, &heldout, &sched, cfg.sample_steps, seed)?;
        let (lin, lin_loss) = train_adapter(cfg, &frozen, FusionMode::Linear, seed, &train_set, &sched, &device)?;
        let linear_l2 = heldout_l2(&lin, &heldout, &sched, cfg.sample_steps, seed)?;
        progress(&format!("seed {seed} linear: loss {lin_loss:.4} l2 {linear_l2:.5} ({:.0}s)", start.elapsed().as_secs_f64()));
        let (vol, vol_loss) = train_adapter(cfg, &frozen, FusionMode::Volterra, seed, &train_set, &sched, &device)?;
        let w: Vec<String> = vol.fusion_weights().iter().flatten().map(|w| format!("{w:.3}")).collect();
        progress(&format!("seed {seed} volterra trained: loss {vol_loss:.4} w [{}]", w.join(", ")));
        let volterra_l2 = heldout_l2(&vol, &heldout, &sched, cfg.sample_steps, seed)?;
        progress(&format!(
            "seed {seed} volterra: l2 {volterra_l2:.5} base l2 {base_l2:.5} ({:.0}s)",
            start.elapsed().as_secs_f64()
        ));
        seeds.push(SeedResult {
            seed,
            base_l2,
            linear_l2,
            volterra_l2,
            linear_final_loss: lin_loss,
            volterra_final_loss: vol_loss,
            beats_base: volterra_l2 < cfg.base_ratio * base_l2,
            beats_linear: volterra_l2 <= linear_l2,
        });
    }
    let majority = |f: fn(&SeedResult) -> bool| 2 * seeds.iter().filter(|s| f(s)).count() > seeds.len();
    Ok(ExperimentReport {
        base_final_loss,
        majority_beats_base: majority(|s| s.beats_base),
        majority_beats_linear: majority(|s| s.beats_linear),
        seeds,
        seconds: start.elapsed().as_secs_f64(),
    })
}
