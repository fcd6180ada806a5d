//! Second-order Volterra layer with a rank-Q factored quadratic kernel.
//!
//! The layer computes
//!
//! ```text
//! V(x) = W1 * x + sum_{q=1..Q} (W2a_q * x) ⊙ (W2b_q * x)
//! ```
//!
//! where `*` is a 2D convolution and `⊙` the elementwise product. Both
//! factor convolutions of a pair see the same input. Factoring the
//! quadratic kernel into `Q` outer products keeps the parameter count at
//! `C_out·C_in·k²·(1 + 2Q)`.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckReport};
use crate::tensor_util;

/// Rank used when a configuration does not say otherwise.
pub const DEFAULT_RANK: usize = 2;

/// Intermediate activation `[B, C, H, W]`.
pub type FeatureMap = Tensor;

/// Weights of one Volterra layer.
#[derive(Clone, Debug)]
pub struct VolterraLayerParams {
    w1: Var,
    w2a: Vec<Var>,
    w2b: Vec<Var>,
    stride: usize,
    padding: usize,
}

impl VolterraLayerParams {
    /// All-zero layer with "same" padding and unit stride.
    pub fn init_zero(
        c_in: usize,
        c_out: usize,
        k: usize,
        rank_q: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        validate_dims(c_in, c_out, k, rank_q)?;
        let shape = (c_out, c_in, k, k);
        let w1 = Var::zeros(shape, dtype, device)?;
        let w2a = (0..rank_q)
            .map(|_| Var::zeros(shape, dtype, device))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let w2b = (0..rank_q)
            .map(|_| Var::zeros(shape, dtype, device))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            w1,
            w2a,
            w2b,
            stride: 1,
            padding: k / 2,
        })
    }

    /// Gaussian weights with standard deviation `std`.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        rank_q: usize,
        std: f64,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        validate_dims(c_in, c_out, k, rank_q)?;
        let shape = [c_out, c_in, k, k];
        let mut draw = || -> Result<Var> {
            Ok(Var::from_tensor(&tensor_util::randn(
                &shape, std, rng, dtype, device,
            )?)?)
        };
        let w1 = draw()?;
        let mut w2a = Vec::with_capacity(rank_q);
        let mut w2b = Vec::with_capacity(rank_q);
        for _ in 0..rank_q {
            w2a.push(draw()?);
            w2b.push(draw()?);
        }
        Ok(Self {
            w1,
            w2a,
            w2b,
            stride: 1,
            padding: k / 2,
        })
    }

    /// Builds a layer from explicit kernels, checking that the factor lists
    /// agree in length and every kernel shares one `[C_out, C_in, k, k]` shape.
    pub fn from_tensors(
        w1: &Tensor,
        w2a: &[Tensor],
        w2b: &[Tensor],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (c_out, c_in, kh, kw) = w1.dims4()?;
        if kh != kw {
            return Err(Error::shape("volterra kernel", "kernel width", kh, kw));
        }
        if w2a.is_empty() {
            return Err(Error::invalid("rank_q must be at least 1"));
        }
        if w2a.len() != w2b.len() {
            return Err(Error::shape(
                "volterra kernel",
                "second-order factor count",
                w2a.len(),
                w2b.len(),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        for t in w2a.iter().chain(w2b) {
            let (o, i, h, w) = t.dims4()?;
            for (dim, expected, actual) in [
                ("output channels", c_out, o),
                ("input channels", c_in, i),
                ("kernel height", kh, h),
                ("kernel width", kw, w),
            ] {
                if expected != actual {
                    return Err(Error::shape("volterra kernel", dim, expected, actual));
                }
            }
        }
        let var = |t: &Tensor| Var::from_tensor(t);
        Ok(Self {
            w1: var(w1)?,
            w2a: w2a.iter().map(var).collect::<candle_core::Result<_>>()?,
            w2b: w2b.iter().map(var).collect::<candle_core::Result<_>>()?,
            stride,
            padding,
        })
    }

    pub fn c_in(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn c_out(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.w1.dims()[2]
    }

    pub fn rank_q(&self) -> usize {
        self.w2a.len()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn dtype(&self) -> DType {
        self.w1.dtype()
    }

    pub fn w1(&self) -> &Tensor {
        self.w1.as_tensor()
    }

    pub fn w2a(&self, q: usize) -> &Tensor {
        self.w2a[q].as_tensor()
    }

    pub fn w2b(&self, q: usize) -> &Tensor {
        self.w2b[q].as_tensor()
    }

    /// `C_out·C_in·k²·(1 + 2Q)`; depends on shape only.
    pub fn param_count(&self) -> usize {
        let k = self.kernel_size();
        self.c_out() * self.c_in() * k * k * (1 + 2 * self.rank_q())
    }

    /// Parameters as `(name, var)` with names `w1`, `w2a.{q}`, `w2b.{q}`.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = vec![("w1".to_string(), self.w1.clone())];
        for (q, v) in self.w2a.iter().enumerate() {
            out.push((format!("w2a.{q}"), v.clone()));
        }
        for (q, v) in self.w2b.iter().enumerate() {
            out.push((format!("w2b.{q}"), v.clone()));
        }
        out
    }

    /// Inserts every parameter into `varmap` under `prefix.{name}`.
    pub fn register(&self, varmap: &VarMap, prefix: &str) {
        let mut data = varmap.data().lock().expect("varmap lock poisoned");
        for (name, var) in self.named_vars() {
            data.insert(format!("{prefix}.{name}"), var);
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (_b, c, h, w) = x.dims4()?;
        if c != self.c_in() {
            return Err(Error::shape(
                "volterra_forward",
                "input channels",
                self.c_in(),
                c,
            ));
        }
        let k = self.kernel_size();
        if h + 2 * self.padding < k {
            return Err(Error::shape(
                "volterra_forward",
                "padded input height",
                k,
                h + 2 * self.padding,
            ));
        }
        if w + 2 * self.padding < k {
            return Err(Error::shape(
                "volterra_forward",
                "padded input width",
                k,
                w + 2 * self.padding,
            ));
        }
        let x = if x.dtype() == self.dtype() {
            x.clone()
        } else {
            x.to_dtype(self.dtype())?
        };

        // One convolution over the stacked kernels [W1; W2a_1..Q; W2b_1..Q].
        let mut kernels: Vec<&Tensor> = Vec::with_capacity(1 + 2 * self.rank_q());
        kernels.push(self.w1.as_tensor());
        kernels.extend(self.w2a.iter().map(|v| v.as_tensor()));
        kernels.extend(self.w2b.iter().map(|v| v.as_tensor()));
        let stacked = Tensor::cat(&kernels, 0)?;
        let responses = crate::conv::conv2d(&x, &stacked, self.padding, self.stride)?;

        let c_out = self.c_out();
        let q = self.rank_q();
        let mut out = responses.narrow(1, 0, c_out)?;
        for i in 0..q {
            let a = responses.narrow(1, (1 + i) * c_out, c_out)?;
            let b = responses.narrow(1, (1 + q + i) * c_out, c_out)?;
            out = (out + a.mul(&b)?)?;
        }
        Ok(out)
    }
}

fn validate_dims(c_in: usize, c_out: usize, k: usize, rank_q: usize) -> Result<()> {
    for (name, v) in [("c_in", c_in), ("c_out", c_out), ("k", k), ("rank_q", rank_q)] {
        if v == 0 {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
    }
    Ok(())
}

pub fn volterra_forward(x: &FeatureMap, p: &VolterraLayerParams) -> Result<FeatureMap> {
    p.forward(x)
}

/// Zero layer in single precision on the CPU, the configuration used for
/// training bridges.
pub fn init_zero(c_in: usize, c_out: usize, k: usize, rank_q: usize) -> Result<VolterraLayerParams> {
    VolterraLayerParams::init_zero(c_in, c_out, k, rank_q, DType::F32, &Device::Cpu)
}

pub fn param_count(p: &VolterraLayerParams) -> usize {
    p.param_count()
}

/// Compares backprop gradients of `sum(V(x))` against central differences
/// over every parameter entry. Requires double precision.
pub fn gradient_check(
    p: &VolterraLayerParams,
    x: &FeatureMap,
    eps: f64,
) -> Result<GradCheckReport> {
    let params = p.named_vars();
    gradcheck::check_gradients(&params, || Ok(p.forward(x)?.sum_all()?), eps)
}
