//! Per-block exchange between the base and control streams.
//!
//! Linear mode adds a zero-initialised 1×1 projection of the opposite
//! stream. Volterra mode blends the block output with a zero-initialised
//! Volterra layer over the channel concatenation of both streams:
//!
//! ```text
//! x_b = (1 - w)·F_b + w·V_bc([F_b, F_c])
//! x_c = (1 - w)·F_c + w·V_cb([F_c, F_b])
//! ```
//!
//! with one learnable `w`, clamped to `[0, 1]` at use and starting at 0.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, ParamBuilder};
use crate::tensor_util;
use crate::volterra::VolterraLayerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Linear,
    Volterra,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Linear => "linear",
            FusionMode::Volterra => "volterra",
        })
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FusionMode::Linear),
            "volterra" => Ok(FusionMode::Volterra),
            other => Err(Error::config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Zero-initialised 1×1 convolution without bias.
#[derive(Clone, Debug)]
pub struct ZeroConvParams {
    kernel: Var,
}

impl ZeroConvParams {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let kernel = pb.get(&[c_out, c_in, 1, 1], "kernel", Init::Zeros)?;
        Ok(Self {
            kernel: Var::from_tensor(&kernel)?,
        })
    }

    pub fn kernel(&self) -> &Var {
        &self.kernel
    }

    pub fn c_in(&self) -> usize {
        self.kernel.dims()[1]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.elem_count()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::conv::conv2d(x, self.kernel.as_tensor(), 0, 1)?)
    }
}

#[derive(Clone, Debug)]
pub enum Bridge {
    ZeroConv(ZeroConvParams),
    Volterra(VolterraLayerParams),
}

impl Bridge {
    pub fn param_count(&self) -> usize {
        match self {
            Bridge::ZeroConv(z) => z.param_count(),
            Bridge::Volterra(v) => v.param_count(),
        }
    }

    pub fn named_vars(&self) -> Vec<(String, Var)> {
        match self {
            Bridge::ZeroConv(z) => vec![("kernel".into(), z.kernel.clone())],
            Bridge::Volterra(v) => v.named_vars(),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Bridge::ZeroConv(z) => z.forward(x),
            Bridge::Volterra(v) => v.forward(x),
        }
    }

    fn c_in(&self) -> usize {
        match self {
            Bridge::ZeroConv(z) => z.c_in(),
            Bridge::Volterra(v) => v.c_in(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    mode: FusionMode,
    /// base → control
    bridge_cb: Bridge,
    /// control → base
    bridge_bc: Bridge,
    weight: Option<Var>,
    c_base: usize,
    c_control: usize,
}

impl FusionBlock {
    /// Block whose bridges output zero at construction; parameters are
    /// named `bridge_cb.*`, `bridge_bc.*` and (volterra mode) `w` under
    /// `pb`. `factor_std` is the init scale of the `w2a` factors; the
    /// paired `w2b` factors start at zero, so the quadratic term is still
    /// zero but has a gradient. With `factor_std = 0` every entry is zero.
    pub fn new(
        pb: &ParamBuilder,
        mode: FusionMode,
        c_base: usize,
        c_control: usize,
        rank_q: usize,
        kernel_size: usize,
        factor_std: f64,
    ) -> Result<Self> {
        if c_base == 0 || c_control == 0 {
            return Err(Error::invalid("fusion channel counts must be positive"));
        }
        let (bridge_cb, bridge_bc, weight) = match mode {
            FusionMode::Linear => (
                Bridge::ZeroConv(ZeroConvParams::new(&pb.pp("bridge_cb"), c_base, c_control)?),
                Bridge::ZeroConv(ZeroConvParams::new(&pb.pp("bridge_bc"), c_control, c_base)?),
                None,
            ),
            FusionMode::Volterra => {
                if kernel_size == 0 || kernel_size % 2 == 0 {
                    return Err(Error::invalid("volterra bridge kernel must be odd"));
                }
                let c_cat = c_base + c_control;
                let cb = volterra_bridge(&pb.pp("bridge_cb"), c_cat, c_control, kernel_size, rank_q, factor_std)?;
                let bc = volterra_bridge(&pb.pp("bridge_bc"), c_cat, c_base, kernel_size, rank_q, factor_std)?;
                let w = pb.get(&[1], "w", Init::Zeros)?;
                (
                    Bridge::Volterra(cb),
                    Bridge::Volterra(bc),
                    Some(Var::from_tensor(&w)?),
                )
            }
        };
        Ok(Self {
            mode,
            bridge_cb,
            bridge_bc,
            weight,
            c_base,
            c_control,
        })
    }

    /// Stand-alone all-zero trainable block on the CPU, mostly for tests
    /// and probes.
    pub fn standalone(
        mode: FusionMode,
        c_base: usize,
        c_control: usize,
        rank_q: usize,
        kernel_size: usize,
        dtype: DType,
    ) -> Result<Self> {
        let vm = VarMap::new();
        let pb = ParamBuilder::trainable(&vm, 0, dtype, &Device::Cpu);
        Self::new(&pb, mode, c_base, c_control, rank_q, kernel_size, 0.0)
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn bridge_cb(&self) -> &Bridge {
        &self.bridge_cb
    }

    pub fn bridge_bc(&self) -> &Bridge {
        &self.bridge_bc
    }

    pub fn base_channels(&self) -> usize {
        self.c_base
    }

    pub fn control_channels(&self) -> usize {
        self.c_control
    }

    /// Raw (unclamped) fusion weight; `None` in linear mode.
    pub fn fusion_weight(&self) -> Option<f64> {
        self.weight
            .as_ref()
            .map(|w| tensor_util::scalar_f64(w.as_tensor()).expect("scalar weight"))
    }

    pub fn set_fusion_weight(&self, value: f64) -> Result<()> {
        match &self.weight {
            Some(w) => {
                let t = Tensor::new(&[value], w.device())?.to_dtype(w.dtype())?;
                w.set(&t)?;
                Ok(())
            }
            None => Err(Error::invalid("linear fusion has no fusion weight")),
        }
    }

    /// Clips the raw weight back into `[0, 1]` after an optimizer update.
    pub fn project_weight(&self) -> Result<()> {
        if let Some(w) = &self.weight {
            w.set(&w.as_tensor().clamp(0f64, 1f64)?)?;
        }
        Ok(())
    }

    /// Every trainable tensor of the block: bridges and the fusion weight.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (prefix, bridge) in [("bridge_cb", &self.bridge_cb), ("bridge_bc", &self.bridge_bc)] {
            for (name, var) in bridge.named_vars() {
                out.push((format!("{prefix}.{name}"), var));
            }
        }
        if let Some(w) = &self.weight {
            out.push(("w".into(), w.clone()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.bridge_cb.param_count() + self.bridge_bc.param_count() + self.weight.as_ref().map_or(0, |w| w.elem_count())
    }

    fn check(&self, fb: &Tensor, fc: &Tensor) -> Result<()> {
        let (bb, cb, hb, wb) = fb.dims4()?;
        let (bc, cc, hc, wc) = fc.dims4()?;
        if cb != self.c_base {
            return Err(Error::shape("fusion", "base channels", self.c_base, cb));
        }
        if cc != self.c_control {
            return Err(Error::shape("fusion", "control channels", self.c_control, cc));
        }
        if bb != bc {
            return Err(Error::shape("fusion", "batch size", bb, bc));
        }
        if hb != hc {
            return Err(Error::shape("fusion", "height", hb, hc));
        }
        if wb != wc {
            return Err(Error::shape("fusion", "width", wb, wc));
        }
        Ok(())
    }

    fn clamped_weight(&self) -> Result<Tensor> {
        let w = self.weight.as_ref().expect("volterra fusion has a weight");
        Ok(w.as_tensor().clamp(0f64, 1f64)?.reshape((1, 1, 1, 1))?)
    }

    fn blend(&self, own: &Tensor, bridged: &Tensor) -> Result<Tensor> {
        let w = self.clamped_weight()?.to_dtype(own.dtype())?;
        let keep = w.affine(-1.0, 1.0)?;
        Ok((own.broadcast_mul(&keep)? + bridged.broadcast_mul(&w)?)?)
    }

    /// Control information into the base block output.
    pub fn fuse_into_base(&self, fb_out: &Tensor, fc_out: &Tensor) -> Result<Tensor> {
        self.check(fb_out, fc_out)?;
        match self.mode {
            FusionMode::Linear => Ok((fb_out + self.bridge_bc.forward(fc_out)?)?),
            FusionMode::Volterra => {
                let cat = Tensor::cat(&[fb_out, fc_out], 1)?;
                debug_assert_eq!(cat.dim(1)?, self.bridge_bc.c_in());
                let v = self.bridge_bc.forward(&cat)?;
                self.blend(fb_out, &v)
            }
        }
    }

    /// Base information into the control block output.
    pub fn fuse_into_control(&self, fc_out: &Tensor, fb_out: &Tensor) -> Result<Tensor> {
        self.check(fb_out, fc_out)?;
        match self.mode {
            FusionMode::Linear => Ok((fc_out + self.bridge_cb.forward(fb_out)?)?),
            FusionMode::Volterra => {
                let cat = Tensor::cat(&[fc_out, fb_out], 1)?;
                let v = self.bridge_cb.forward(&cat)?;
                self.blend(fc_out, &v)
            }
        }
    }
}

fn volterra_bridge(
    pb: &ParamBuilder,
    c_in: usize,
    c_out: usize,
    k: usize,
    rank_q: usize,
    factor_std: f64,
) -> Result<VolterraLayerParams> {
    if rank_q == 0 {
        return Err(Error::invalid("rank_q must be at least 1"));
    }
    if !(factor_std >= 0.0 && factor_std.is_finite()) {
        return Err(Error::invalid(format!("bridge factor std must be finite and >= 0, got {factor_std}")));
    }
    let factor_init = if factor_std == 0.0 { Init::Zeros } else { Init::Normal(factor_std) };
    let shape = [c_out, c_in, k, k];
    let w1 = pb.get(&shape, "w1", Init::Zeros)?;
    let mut w2a = Vec::with_capacity(rank_q);
    let mut w2b = Vec::with_capacity(rank_q);
    for q in 0..rank_q {
        w2a.push(pb.get(&shape, &format!("w2a.{q}"), factor_init)?);
    }
    for q in 0..rank_q {
        w2b.push(pb.get(&shape, &format!("w2b.{q}"), Init::Zeros)?);
    }
    VolterraLayerParams::from_tensors(&w1, &w2a, &w2b, 1, k / 2)
}
