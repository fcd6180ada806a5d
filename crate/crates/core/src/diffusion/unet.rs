//! Desk-scale U-Net used as the frozen base model.
//!
//! The encoder is exposed block by block so an adapter can run a control
//! stream in lockstep and exchange features after every block.

use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Side of the square pixel patches folded into channels before the
    /// stem and unfolded after the output conv.
    pub patch: usize,
    /// Channel width per resolution level, finest first.
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub text_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            patch: 2,
            widths: vec![16, 32],
            blocks_per_level: 1,
            time_dim: 32,
            emb_dim: 64,
            text_dim: crate::diffusion::text::DEFAULT_TEXT_DIM,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("unet widths must be non-empty and positive"));
        }
        if self.blocks_per_level == 0 || self.in_channels == 0 || self.patch == 0 {
            return Err(Error::config("unet blocks_per_level, in_channels and patch must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::config("unet time_dim must be even and >= 2"));
        }
        Ok(())
    }

    /// Channels seen by the stem: `in_channels · patch²`.
    pub fn latent_channels(&self) -> usize {
        self.in_channels * self.patch * self.patch
    }

    /// Spatial size must split into patches and survive `levels - 1`
    /// halvings.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let factor = self.patch << (self.widths.len() - 1);
        if h % factor != 0 {
            return Err(Error::shape("unet input", "height divisibility", factor, h % factor));
        }
        if w % factor != 0 {
            return Err(Error::shape("unet input", "width divisibility", factor, w % factor));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.widths.len() * self.blocks_per_level
    }
}

/// `(c_in, c_out, downsample)` of every encoder block for a width ladder.
pub fn encoder_plan(widths: &[usize], blocks_per_level: usize) -> Vec<(usize, usize, bool)> {
    let mut plan = Vec::with_capacity(widths.len() * blocks_per_level);
    let mut c_prev = widths[0];
    for (level, &c) in widths.iter().enumerate() {
        for j in 0..blocks_per_level {
            plan.push((c_prev, c, level > 0 && j == 0));
            c_prev = c;
        }
    }
    plan
}

/// Residual block conditioned on the joint time/text embedding. The first
/// block of every coarser level halves the resolution with a strided conv.
#[derive(Clone, Debug)]
pub struct ResBlock {
    down: Option<Conv2d>,
    conv1: Conv2d,
    emb: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    c_out: usize,
}

impl ResBlock {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, emb_dim: usize, downsample: bool) -> Result<Self> {
        let down = if downsample {
            Some(Conv2d::new(&pb.pp("down"), c_in, c_in, 3, 2, Init::Kaiming { gain: 1.0 })?)
        } else {
            None
        };
        let conv1 = Conv2d::new(&pb.pp("conv1"), c_in, c_out, 3, 1, Init::Kaiming { gain: 1.0 })?;
        let emb = Linear::new(&pb.pp("emb"), emb_dim, c_out, Init::Kaiming { gain: 0.5 })?;
        let conv2 = Conv2d::new(&pb.pp("conv2"), c_out, c_out, 3, 1, Init::Kaiming { gain: 0.5 })?;
        let skip = if c_in != c_out {
            Some(Conv2d::new(&pb.pp("skip"), c_in, c_out, 1, 1, Init::Kaiming { gain: 1.0 })?)
        } else {
            None
        };
        Ok(Self {
            down,
            conv1,
            emb,
            conv2,
            skip,
            c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let x = match &self.down {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        let h = self.conv1.forward(&x.silu()?)?;
        let e = self.emb.forward(&emb.silu()?)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(&x)?,
            None => x,
        };
        Ok((skip + h)?)
    }
}

/// `[B, C, H, W]` to `[B, C·p², H/p, W/p]`; channel `c·p² + dy·p + dx`
/// holds pixel `(p·y + dy, p·x + dx)` of channel `c`.
pub fn space_to_depth(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape("space_to_depth", "size divisibility", p, if h % p != 0 { h } else { w }));
    }
    Ok(x.reshape((b, c, h / p, p, w / p, p))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * p * p, h / p, w / p))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, cp, h, w) = x.dims4()?;
    if cp % (p * p) != 0 {
        return Err(Error::shape("depth_to_space", "channel divisibility", p * p, cp));
    }
    let c = cp / (p * p);
    Ok(x.reshape((b, c, p, p, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * p, w * p))?)
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct BaseUnet {
    config: UNetConfig,
    time1: Linear,
    time2: Linear,
    text: Linear,
    conv_in: Conv2d,
    encoder: Vec<ResBlock>,
    mid: ResBlock,
    decoder: Vec<ResBlock>,
    conv_out: Conv2d,
    dtype: DType,
    device: Device,
}

impl BaseUnet {
    /// Builds the model under `pb`; parameter names start with `base.`.
    pub fn new(pb: &ParamBuilder, config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let pb = pb.pp("base");
        let time1 = Linear::new(&pb.pp("time.l1"), config.time_dim, config.emb_dim, Init::Kaiming { gain: 1.0 })?;
        let time2 = Linear::new(&pb.pp("time.l2"), config.emb_dim, config.emb_dim, Init::Kaiming { gain: 1.0 })?;
        let text = Linear::new(&pb.pp("text"), config.text_dim, config.emb_dim, Init::Kaiming { gain: 1.0 })?;
        let w0 = config.widths[0];
        let zc = config.latent_channels();
        let conv_in = Conv2d::new(&pb.pp("stem.conv_in"), zc, w0, 3, 1, Init::Kaiming { gain: 1.0 })?;
        let encoder = encoder_plan(&config.widths, config.blocks_per_level)
            .into_iter()
            .enumerate()
            .map(|(i, (c_in, c_out, down))| ResBlock::new(&pb.pp(i), c_in, c_out, config.emb_dim, down))
            .collect::<Result<Vec<_>>>()?;
        let levels = config.widths.len();
        let c_last = config.widths[levels - 1];
        let mid = ResBlock::new(&pb.pp("mid"), c_last, c_last, config.emb_dim, false)?;
        let mut decoder = Vec::with_capacity(levels);
        for level in 0..levels {
            let c_h = if level == levels - 1 { c_last } else { config.widths[level + 1] };
            let c_skip = config.widths[level];
            decoder.push(ResBlock::new(
                &pb.pp(format!("dec{level}")),
                c_h + c_skip,
                c_skip,
                config.emb_dim,
                false,
            )?);
        }
        let conv_out = Conv2d::new(&pb.pp("out"), w0, zc, 3, 1, Init::Kaiming { gain: 0.1 })?;
        Ok(Self {
            config: config.clone(),
            time1,
            time2,
            text,
            conv_in,
            encoder,
            mid,
            decoder,
            conv_out,
            dtype: pb.dtype(),
            device: pb.device().clone(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_blocks(&self) -> usize {
        self.encoder.len()
    }

    pub fn block_channels(&self, i: usize) -> usize {
        self.encoder[i].out_channels()
    }

    /// Joint time and text embedding `[B, emb_dim]`.
    pub fn embed(&self, ts: &[usize], text: &Tensor) -> Result<Tensor> {
        let (b, d) = text.dims2()?;
        if b != ts.len() {
            return Err(Error::shape("unet embed", "batch size", ts.len(), b));
        }
        if d != self.config.text_dim {
            return Err(Error::shape("unet embed", "text embedding width", self.config.text_dim, d));
        }
        let t = timestep_embedding(ts, self.config.time_dim, self.dtype, &self.device)?;
        let t = self.time2.forward(&self.time1.forward(&t)?.silu()?)?;
        Ok((t + self.text.forward(&text.to_dtype(self.dtype)?)?)?)
    }

    pub fn stem(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape("unet input", "channels", self.config.in_channels, c));
        }
        self.config.check_input_size(h, w)?;
        Ok(self.conv_in.forward(&space_to_depth(z, self.config.patch)?)?)
    }

    pub fn encoder_block(&self, i: usize, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        self.encoder[i].forward(x, emb)
    }

    /// Base-only decoder over the encoder block outputs, one per block.
    pub fn decode(&self, block_outputs: &[Tensor], emb: &Tensor) -> Result<Tensor> {
        if block_outputs.len() != self.encoder.len() {
            return Err(Error::shape(
                "unet decode",
                "encoder outputs",
                self.encoder.len(),
                block_outputs.len(),
            ));
        }
        let bpl = self.config.blocks_per_level;
        let levels = self.config.widths.len();
        let mut h = self.mid.forward(&block_outputs[block_outputs.len() - 1], emb)?;
        for level in (0..levels).rev() {
            let skip = &block_outputs[level * bpl + bpl - 1];
            if level != levels - 1 {
                let (_, _, sh, sw) = skip.dims4()?;
                h = h.upsample_nearest2d(sh, sw)?;
            }
            h = self.decoder[level].forward(&Tensor::cat(&[&h, skip], 1)?, emb)?;
        }
        let out = self.conv_out.forward(&h.silu()?)?;
        depth_to_space(&out, self.config.patch)
    }

    /// Noise prediction of the base model alone.
    pub fn forward(&self, z: &Tensor, ts: &[usize], text: &Tensor) -> Result<Tensor> {
        let emb = self.embed(ts, text)?;
        let mut x = self.stem(z)?;
        let mut outs = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            x = block.forward(&x, &emb)?;
            outs.push(x.clone());
        }
        self.decode(&outs, &emb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;

    #[test]
    fn plan_downsamples_at_level_starts() {
        let plan = encoder_plan(&[16, 32, 32], 2);
        assert_eq!(
            plan,
            vec![
                (16, 16, false),
                (16, 16, false),
                (16, 32, true),
                (32, 32, false),
                (32, 32, true),
                (32, 32, false)
            ]
        );
    }

    #[test]
    fn forward_shape() {
        let vm = VarMap::new();
        let pb = ParamBuilder::trainable(&vm, 1, DType::F32, &Device::Cpu);
        let cfg = UNetConfig {
            widths: vec![16, 32, 32],
            blocks_per_level: 2,
            ..UNetConfig::default()
        };
        let net = BaseUnet::new(&pb, &cfg).unwrap();
        assert_eq!(net.num_blocks(), 6);
        let z = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let text = Tensor::zeros((2, cfg.text_dim), DType::F32, &Device::Cpu).unwrap();
        let eps = net.forward(&z, &[0, 5], &text).unwrap();
        assert_eq!(eps.dims(), &[2, 3, 32, 32]);
    }

    #[test]
    fn rejects_indivisible_size() {
        let vm = VarMap::new();
        let pb = ParamBuilder::trainable(&vm, 1, DType::F32, &Device::Cpu);
        let net = BaseUnet::new(&pb, &UNetConfig::default()).unwrap();
        let z = Tensor::zeros((1, 3, 30, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(net.stem(&z).is_err());
    }

    #[test]
    fn patch_fold_layout_and_inverse() {
        let x = Tensor::arange(0f32, 2.0 * 16.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 8, 2, 2]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // Channel 1 of the folded tensor is offset (0, 1) of input channel 0.
        assert_eq!(&v[4..8], &[1.0, 3.0, 9.0, 11.0]);
        // Channel 6 is offset (1, 0) of input channel 1.
        assert_eq!(&v[24..28], &[20.0, 22.0, 28.0, 30.0]);
        let back = depth_to_space(&y, 2).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}
