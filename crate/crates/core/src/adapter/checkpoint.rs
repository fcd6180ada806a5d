//! Checkpoint directory: `base.safetensors`, `adapter.safetensors` and a
//! `manifest.json` describing the assembly.
//!
//! Tensor names follow `{stream}.{block_index}.{param_name}`, e.g.
//! `control.3.conv1.weight` or `fusion.0.bridge_bc.w2a.1`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::diffusion::unet::UNetConfig;
use crate::error::{Error, IoContext, Result};

use super::{AdapterAssembly, AdapterConfig, FusionMode};

pub const BASE_FILE: &str = "base.safetensors";
pub const ADAPTER_FILE: &str = "adapter.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockShape {
    pub base_channels: usize,
    pub control_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub mode: FusionMode,
    pub rank_q: usize,
    pub blocks: Vec<BlockShape>,
    /// Raw fusion weights; empty in linear mode.
    pub fusion_weights: Vec<f64>,
    pub base_sha256: String,
    pub unet: UNetConfig,
    pub adapter: AdapterConfig,
}

pub fn save_tensors(path: &Path, tensors: &HashMap<String, Tensor>) -> Result<()> {
    candle_core::safetensors::save(tensors, path).map_err(|e| Error::Stage {
        stage: "checkpoint".into(),
        message: format!("{}: {e}", path.display()),
    })
}

pub fn load_tensors(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    Ok(candle_core::safetensors::load(path, device)?)
}

/// Writes base weights, trainable weights and the manifest under `dir`.
pub fn save(asm: &AdapterAssembly, dir: &Path) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).at(dir)?;
    save_tensors(&dir.join(BASE_FILE), asm.base_params())?;
    let trained: HashMap<String, Tensor> = asm
        .trainable_parameters()
        .into_iter()
        .map(|(n, v)| (n, v.as_tensor().detach()))
        .collect();
    save_tensors(&dir.join(ADAPTER_FILE), &trained)?;
    let manifest = CheckpointManifest {
        format: 1,
        mode: asm.mode(),
        rank_q: asm.config().rank_q,
        blocks: asm
            .fusion_blocks()
            .iter()
            .map(|f| BlockShape {
                base_channels: f.base_channels(),
                control_channels: f.control_channels(),
            })
            .collect(),
        fusion_weights: asm.fusion_weights().into_iter().flatten().collect(),
        base_sha256: asm.base_hash()?,
        unet: asm.base().config().clone(),
        adapter: asm.config().clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).at(&path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Restores an assembly and verifies the base hash recorded at save time.
pub fn load(dir: &Path, device: &Device) -> Result<AdapterAssembly> {
    let manifest = read_manifest(dir)?;
    let base = load_tensors(&dir.join(BASE_FILE), device)?;
    let trained = load_tensors(&dir.join(ADAPTER_FILE), device)?;
    let asm = AdapterAssembly::restore(&manifest.unet, base, &manifest.adapter, trained, device)?;
    let hash = asm.base_hash()?;
    if hash != manifest.base_sha256 {
        return Err(Error::Conflict(format!(
            "base weights hash {hash} does not match manifest {}",
            manifest.base_sha256
        )));
    }
    Ok(asm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::unet::BaseUnet;
    use crate::nn::{self, ParamBuilder};
    use crate::tensor_util;
    use candle_core::DType;
    use candle_nn::VarMap;

    #[test]
    fn round_trip() {
        let u = UNetConfig {
            widths: vec![4, 4],
            blocks_per_level: 1,
            time_dim: 4,
            emb_dim: 4,
            text_dim: 4,
            ..UNetConfig::default()
        };
        let vm = VarMap::new();
        BaseUnet::new(&ParamBuilder::trainable(&vm, 1, DType::F32, &Device::Cpu), &u).unwrap();
        let cfg = AdapterConfig {
            control_widths: vec![4, 4],
            embedder_hidden: 4,
            ..AdapterConfig::default()
        };
        let asm = AdapterAssembly::new(&u, nn::snapshot(&vm).unwrap(), &cfg, 2, &Device::Cpu).unwrap();
        asm.fusion_blocks()[1].set_fusion_weight(0.25).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save(&asm, dir.path()).unwrap();
        assert_eq!(manifest.fusion_weights, vec![0.0, 0.25]);
        let back = load(dir.path(), &Device::Cpu).unwrap();
        let h = |a: &AdapterAssembly| {
            let ps = a.trainable_parameters();
            tensor_util::hash_named(ps.iter().map(|(n, v)| (n.as_str(), v.as_tensor()))).unwrap()
        };
        assert_eq!(h(&asm), h(&back));
        assert_eq!(back.fusion_weights()[1], Some(0.25));
        assert!(back
            .trainable_parameters()
            .iter()
            .any(|(n, _)| n == "fusion.0.bridge_bc.w2a.1"));
    }
}
