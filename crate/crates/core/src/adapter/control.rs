//! Trainable control encoder run in lockstep with the base encoder.

use candle_core::{Module, Tensor};

use crate::diffusion::unet::{encoder_plan, ResBlock};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamBuilder};

use super::AdapterConfig;

#[derive(Clone, Debug)]
pub struct ControlStream {
    embed: [Conv2d; 2],
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    control_channels: usize,
    z_channels: usize,
}

impl ControlStream {
    /// Parameters are named `control.embed.{0,1}`, `control.stem`, `control.{i}.*`.
    pub fn new(
        pb: &ParamBuilder,
        cfg: &AdapterConfig,
        z_channels: usize,
        emb_dim: usize,
        blocks_per_level: usize,
    ) -> Result<Self> {
        let pb = pb.pp("control");
        let widths = &cfg.control_widths;
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::config("control widths must be non-empty and positive"));
        }
        let s = cfg.embedder_stride;
        let hidden = cfg.embedder_hidden;
        let embed = [
            Conv2d::new(&pb.pp("embed.0"), cfg.control_channels, hidden, 3, s, Init::Kaiming { gain: 1.0 })?,
            Conv2d::new(&pb.pp("embed.1"), hidden, widths[0], 3, 1, Init::Kaiming { gain: 1.0 })?,
        ];
        let conv_in = Conv2d::new(&pb.pp("stem"), z_channels, widths[0], 3, 1, Init::Kaiming { gain: 1.0 })?;
        let blocks = encoder_plan(widths, blocks_per_level)
            .into_iter()
            .enumerate()
            .map(|(i, (c_in, c_out, down))| ResBlock::new(&pb.pp(i), c_in, c_out, emb_dim, down))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            conv_in,
            blocks,
            control_channels: cfg.control_channels,
            z_channels,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_channels(&self, i: usize) -> usize {
        self.blocks[i].out_channels()
    }

    /// `x_c⁽⁰⁾ = stem(z_t) + embed(control)`, with `z_t` already folded
    /// into patches.
    pub fn stem(&self, z: &Tensor, control: &Tensor) -> Result<Tensor> {
        let (bz, cz, hz, wz) = z.dims4()?;
        let (bc, cc, _, _) = control.dims4()?;
        if cz != self.z_channels {
            return Err(Error::shape("control stem", "latent channels", self.z_channels, cz));
        }
        if cc != self.control_channels {
            return Err(Error::shape("control stem", "control channels", self.control_channels, cc));
        }
        if bc != bz {
            return Err(Error::shape("control stem", "batch size", bz, bc));
        }
        let e = self.embed[0].forward(&control.to_dtype(z.dtype())?)?.silu()?;
        let e = self.embed[1].forward(&e)?;
        let (_, _, he, we) = e.dims4()?;
        if he != hz {
            return Err(Error::shape("control embedding", "height", hz, he));
        }
        if we != wz {
            return Err(Error::shape("control embedding", "width", wz, we));
        }
        Ok((self.conv_in.forward(z)? + e)?)
    }

    pub fn block(&self, i: usize, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        self.blocks[i].forward(x, emb)
    }
}
