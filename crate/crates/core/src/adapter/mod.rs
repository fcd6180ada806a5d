//! Bidirectional base/control adapter in linear (zero-conv) or Volterra
//! fusion mode, hosting a frozen [`BaseUnet`].

pub mod checkpoint;
pub mod control;
pub mod fusion;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::diffusion::unet::{BaseUnet, UNetConfig};
use crate::diffusion::EpsModel;
use crate::error::{Error, Result};
use crate::nn::{self, ParamBuilder};
use crate::tensor_util;
use crate::volterra::DEFAULT_RANK;

pub use control::ControlStream;
pub use fusion::{Bridge, FusionBlock, FusionMode, ZeroConvParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub mode: FusionMode,
    pub rank_q: usize,
    /// Spatial kernel of the Volterra bridges.
    pub bridge_kernel: usize,
    /// Init std of the first factor of each quadratic pair; the second
    /// factor starts at zero. Zero makes every bridge entry zero.
    pub bridge_factor_std: f64,
    pub control_widths: Vec<usize>,
    /// 3 for image conditioning, 1 for canny maps.
    pub control_channels: usize,
    pub embedder_hidden: usize,
    /// Stride of the first embedder convolution; it must equal the base
    /// model's patch size so the embedding lands on the latent grid.
    pub embedder_stride: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Volterra,
            rank_q: DEFAULT_RANK,
            bridge_kernel: 1,
            bridge_factor_std: 0.01,
            control_widths: vec![8, 16],
            control_channels: 3,
            embedder_hidden: 16,
            embedder_stride: 2,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank_q == 0 {
            return Err(Error::config("adapter rank_q must be at least 1"));
        }
        if self.bridge_kernel == 0 || self.bridge_kernel % 2 == 0 {
            return Err(Error::config("adapter bridge_kernel must be odd"));
        }
        if self.control_channels == 0 || self.embedder_hidden == 0 || self.embedder_stride == 0 {
            return Err(Error::config("adapter channel counts and stride must be positive"));
        }
        if !(self.bridge_factor_std >= 0.0 && self.bridge_factor_std.is_finite()) {
            return Err(Error::config("adapter bridge_factor_std must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Frozen base, trainable control stream and one fusion block per encoder
/// block.
pub struct AdapterAssembly {
    config: AdapterConfig,
    base: BaseUnet,
    base_params: HashMap<String, Tensor>,
    control: ControlStream,
    fusion: Vec<FusionBlock>,
    varmap: VarMap,
}

impl AdapterAssembly {
    /// Assembles around frozen `base_params` (names as produced by
    /// [`BaseUnet::new`]); trainable parts are initialised from `seed`.
    pub fn new(
        unet: &UNetConfig,
        base_params: HashMap<String, Tensor>,
        config: &AdapterConfig,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        let varmap = VarMap::new();
        let pb = ParamBuilder::trainable(&varmap, seed, DType::F32, device);
        Self::build(unet, base_params, config, pb, varmap)
    }

    /// Rebuilds an assembly whose trainable parameters come from `trained`.
    pub fn restore(
        unet: &UNetConfig,
        base_params: HashMap<String, Tensor>,
        config: &AdapterConfig,
        trained: HashMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self> {
        let varmap = VarMap::new();
        let expected = trained.len();
        let pb = ParamBuilder::restored(&varmap, trained.clone(), DType::F32, device);
        let asm = Self::build(unet, base_params, config, pb, varmap)?;
        let got = asm.trainable_parameters().len();
        if got != expected {
            let names: Vec<String> = asm.trainable_parameters().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> = trained.keys().filter(|k| !names.contains(k)).collect();
            return Err(Error::config(format!(
                "checkpoint has {expected} trainable tensors, assembly uses {got}; unused: {extra:?}"
            )));
        }
        Ok(asm)
    }

    fn build(
        unet: &UNetConfig,
        base_params: HashMap<String, Tensor>,
        config: &AdapterConfig,
        pb: ParamBuilder,
        varmap: VarMap,
    ) -> Result<Self> {
        config.validate()?;
        let device = pb.device().clone();
        let base_pb = ParamBuilder::frozen(base_params.clone(), DType::F32, &device);
        let base = BaseUnet::new(&base_pb, unet)?;
        let control_blocks = config.control_widths.len() * unet.blocks_per_level;
        if config.control_widths.len() != unet.widths.len() || control_blocks != base.num_blocks() {
            return Err(Error::shape(
                "adapter assembly",
                "encoder block count",
                base.num_blocks(),
                control_blocks,
            ));
        }
        let control = ControlStream::new(&pb, config, unet.latent_channels(), unet.emb_dim, unet.blocks_per_level)?;
        let fusion = (0..base.num_blocks())
            .map(|i| {
                FusionBlock::new(
                    &pb.pp("fusion").pp(i),
                    config.mode,
                    base.block_channels(i),
                    control.block_channels(i),
                    config.rank_q,
                    config.bridge_kernel,
                    config.bridge_factor_std,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            base,
            base_params,
            control,
            fusion,
            varmap,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn mode(&self) -> FusionMode {
        self.config.mode
    }

    pub fn base(&self) -> &BaseUnet {
        &self.base
    }

    pub fn base_params(&self) -> &HashMap<String, Tensor> {
        &self.base_params
    }

    pub fn fusion_blocks(&self) -> &[FusionBlock] {
        &self.fusion
    }

    pub fn num_exchange_points(&self) -> usize {
        self.fusion.len()
    }

    /// Θ_c, every bridge parameter and every fusion weight, sorted by name.
    /// Base parameters are constants and never appear here.
    pub fn trainable_parameters(&self) -> Vec<(String, Var)> {
        nn::sorted_vars(&self.varmap)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters of the control stream alone.
    pub fn control_parameters(&self) -> Vec<(String, Var)> {
        self.trainable_parameters()
            .into_iter()
            .filter(|(n, _)| n.starts_with("control."))
            .collect()
    }

    /// SHA-256 over the frozen base tensors.
    pub fn base_hash(&self) -> Result<String> {
        tensor_util::hash_named(self.base_params.iter().map(|(k, v)| (k.as_str(), v)))
    }

    /// Clips every fusion weight back into `[0, 1]`.
    pub fn project_fusion_weights(&self) -> Result<()> {
        for f in &self.fusion {
            f.project_weight()?;
        }
        Ok(())
    }

    pub fn fusion_weights(&self) -> Vec<Option<f64>> {
        self.fusion.iter().map(|f| f.fusion_weight()).collect()
    }

    pub fn forward_joint(&self, z_t: &Tensor, ts: &[usize], control: &Tensor, text: &Tensor) -> Result<Tensor> {
        let emb = self.base.embed(ts, text)?;
        let mut xb = self.base.stem(z_t)?;
        let zp = crate::diffusion::unet::space_to_depth(z_t, self.base.config().patch)?;
        let mut xc = self.control.stem(&zp, control)?;
        let mut outs = Vec::with_capacity(self.fusion.len());
        for (i, blk) in self.fusion.iter().enumerate() {
            let fb = self.base.encoder_block(i, &xb, &emb)?;
            let fc = self.control.block(i, &xc, &emb)?;
            xc = blk.fuse_into_control(&fc, &fb)?;
            xb = blk.fuse_into_base(&fb, &fc)?;
            outs.push(xb.clone());
        }
        self.base.decode(&outs, &emb)
    }
}

impl EpsModel for AdapterAssembly {
    fn predict(&self, z_t: &Tensor, ts: &[usize], control: &Tensor, text: &Tensor) -> Result<Tensor> {
        self.forward_joint(z_t, ts, control, text)
    }

    fn trainable(&self) -> Vec<(String, Var)> {
        self.trainable_parameters()
    }

    fn after_update(&self) -> Result<()> {
        self.project_fusion_weights()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::text::TextEmbedder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_unet() -> UNetConfig {
        UNetConfig {
            widths: vec![4, 8],
            blocks_per_level: 1,
            time_dim: 8,
            emb_dim: 8,
            text_dim: 8,
            ..UNetConfig::default()
        }
    }

    fn small_adapter(mode: FusionMode) -> AdapterConfig {
        AdapterConfig {
            mode,
            control_widths: vec![4, 4],
            embedder_hidden: 4,
            ..AdapterConfig::default()
        }
    }

    fn base_params(cfg: &UNetConfig) -> HashMap<String, Tensor> {
        let vm = VarMap::new();
        BaseUnet::new(&ParamBuilder::trainable(&vm, 5, DType::F32, &Device::Cpu), cfg).unwrap();
        nn::snapshot(&vm).unwrap()
    }

    #[test]
    fn init_identity_in_both_modes() {
        let u = small_unet();
        let bp = base_params(&u);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = tensor_util::randn(&[2, 3, 8, 8], 1.0, &mut rng, DType::F32, &Device::Cpu).unwrap();
        let c = tensor_util::randn(&[2, 3, 8, 8], 1.0, &mut rng, DType::F32, &Device::Cpu).unwrap();
        let text = TextEmbedder::new(64, 8, 1).unwrap().embed_batch(&["add a cat", "remove"], DType::F32, &Device::Cpu).unwrap();
        let mut outs = Vec::new();
        for mode in [FusionMode::Volterra, FusionMode::Linear] {
            let asm = AdapterAssembly::new(&u, bp.clone(), &small_adapter(mode), 3, &Device::Cpu).unwrap();
            let joint = asm.forward_joint(&z, &[3, 50], &c, &text).unwrap();
            let base = asm.base().forward(&z, &[3, 50], &text).unwrap();
            let diff = (joint.clone() - base).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
            outs.push(joint);
        }
        let diff = (&outs[0] - &outs[1]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn block_count_mismatch_rejected() {
        let u = small_unet();
        let cfg = AdapterConfig {
            control_widths: vec![4, 4, 4],
            ..small_adapter(FusionMode::Volterra)
        };
        let err = AdapterAssembly::new(&u, base_params(&u), &cfg, 0, &Device::Cpu).err().unwrap();
        assert!(err.to_string().contains("encoder block count"), "{err}");
    }

    #[test]
    fn trainable_set_excludes_base_and_orders_modes() {
        let u = small_unet();
        let bp = base_params(&u);
        let lin = AdapterAssembly::new(&u, bp.clone(), &small_adapter(FusionMode::Linear), 0, &Device::Cpu).unwrap();
        let vol = AdapterAssembly::new(&u, bp, &small_adapter(FusionMode::Volterra), 0, &Device::Cpu).unwrap();
        for asm in [&lin, &vol] {
            for (name, _) in asm.trainable_parameters() {
                assert!(!name.starts_with("base."), "{name}");
                assert!(!asm.base_params().contains_key(&name));
            }
        }
        let control: usize = lin.control_parameters().iter().map(|(_, v)| v.elem_count()).sum();
        let zero_convs: usize = lin.fusion_blocks().iter().map(|f| f.param_count()).sum();
        // Linear mode: per block C_b·C_c kernels in each direction.
        let expected: usize = (0..lin.num_exchange_points())
            .map(|i| 2 * lin.base().block_channels(i) * 4)
            .sum();
        assert_eq!(zero_convs, expected);
        assert_eq!(lin.trainable_param_count(), control + zero_convs);
        assert!(vol.trainable_param_count() > lin.trainable_param_count());
    }

    #[test]
    fn wrong_control_size_rejected() {
        let u = small_unet();
        let asm = AdapterAssembly::new(&u, base_params(&u), &small_adapter(FusionMode::Volterra), 0, &Device::Cpu).unwrap();
        let z = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let c = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let t = Tensor::zeros((1, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(asm.forward_joint(&z, &[0], &c, &t).is_err());
    }
}
