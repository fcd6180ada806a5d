//! Seeded parameter construction and the two layer types the toy U-Net and
//! the control stream are built from.
//!
//! Candle's CPU backend cannot be seeded, so parameters are drawn from a
//! ChaCha stream owned by [`ParamBuilder`]. Construction order fixes the
//! draw order, which makes a whole model a pure function of its seed.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_util;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `N(0, gain² · 2 / fan_in)`.
    Kaiming { gain: f64 },
    Normal(f64),
    Zeros,
}

/// Where parameter values come from and whether they become trainable.
#[derive(Clone)]
pub struct ParamBuilder {
    prefix: String,
    /// Trainable when present: each parameter becomes a `Var` registered here.
    varmap: Option<VarMap>,
    /// Values that take precedence over `Init` (checkpoint restore).
    preset: Option<Rc<HashMap<String, Tensor>>>,
    rng: Rc<RefCell<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    /// Trainable parameters initialised from `seed`.
    pub fn trainable(varmap: &VarMap, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            prefix: String::new(),
            varmap: Some(varmap.clone()),
            preset: None,
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            device: device.clone(),
        }
    }

    /// Constant parameters taken verbatim from `tensors`; missing names fail.
    pub fn frozen(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self {
            prefix: String::new(),
            varmap: None,
            preset: Some(Rc::new(tensors)),
            rng: Rc::new(RefCell::new(ChaCha8Rng::seed_from_u64(0))),
            dtype,
            device: device.clone(),
        }
    }

    /// Trainable parameters restored from `tensors`.
    pub fn restored(varmap: &VarMap, tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self {
            preset: Some(Rc::new(tensors)),
            ..Self::trainable(varmap, 0, dtype, device)
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let mut next = self.clone();
        next.prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        next
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.varmap.is_some()
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        // The RNG advances even for preset values so restored and fresh
        // builders stay aligned.
        let fresh = self.draw(shape, init)?;
        let value = match self.preset.as_ref().and_then(|p| p.get(&full)) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::config(format!(
                        "parameter {full} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            None if self.varmap.is_none() => {
                return Err(Error::NotFound(format!("frozen parameter {full}")));
            }
            None => fresh,
        };
        match &self.varmap {
            Some(varmap) => {
                let var = Var::from_tensor(&value.copy()?)?;
                varmap
                    .data()
                    .lock()
                    .expect("varmap lock poisoned")
                    .insert(full, var.clone());
                Ok(var.as_tensor().clone())
            }
            None => Ok(value.detach()),
        }
    }

    fn draw(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut rng = self.rng.borrow_mut();
        match init {
            Init::Zeros => Ok(Tensor::zeros(shape, self.dtype, &self.device)?),
            Init::Normal(std) => tensor_util::randn(shape, std, &mut *rng, self.dtype, &self.device),
            Init::Kaiming { gain } => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let std = gain * (2.0 / fan_in as f64).sqrt();
                tensor_util::randn(shape, std, &mut *rng, self.dtype, &self.device)
            }
        }
    }
}

/// 2D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = pb.get(&[c_out, c_in, k, k], "weight", init)?;
        let bias = pb.get(&[c_out], "bias", Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = crate::conv::conv2d(x, &self.weight, self.padding, self.stride)?;
        y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[d_out, d_in], "weight", init)?,
            bias: pb.get(&[d_out], "bias", Init::Zeros)?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Names and tensors of every var in `varmap`, sorted by name.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut out: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Detached copies of every var, ready for a frozen [`ParamBuilder`].
pub fn snapshot(varmap: &VarMap) -> Result<HashMap<String, Tensor>> {
    sorted_vars(varmap)
        .into_iter()
        .map(|(k, v)| Ok((k, v.as_tensor().copy()?.detach())))
        .collect()
}
