//! 2-D convolution as im2col followed by a single 2-D matmul.
//!
//! The unfold and its adjoint are custom ops, so both directions of the
//! backward pass reduce to matmuls plus one gather or scatter.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.k) / self.stride + 1,
            (self.w + 2 * self.padding - self.k) / self.stride + 1,
        )
    }

    /// Output columns `[ox_lo, ox_hi)` whose tap `kx` lands inside the row.
    fn valid_ox(&self, kx: usize, wo: usize) -> (usize, usize) {
        let lo = (self.padding.saturating_sub(kx)).div_ceil(self.stride);
        let hi = ((self.w + self.padding - kx).div_ceil(self.stride)).min(wo);
        (lo.min(hi), hi)
    }

    /// Calls `f(row, n, oy, iy, kx)` for every kernel tap row that lands
    /// inside the input.
    fn for_each_row(&self, b: usize, ho: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    for n in 0..b {
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy >= 0 && iy < self.h as isize {
                                f(r, n, oy, iy as usize, kx);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("conv: input must be contiguous"),
    }
}

/// `[B, C, H, W]` to `[C·k·k, B·Ho·Wo]`.
struct Unfold(Geometry);

/// Adjoint of [`Unfold`]: `[C·k·k, B·Ho·Wo]` to `[B, C, H, W]`, summing
/// overlapping taps.
struct Fold(Geometry);

fn unfold<T: WithDType>(g: &Geometry, b: usize, x: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = b * ho * wo;
    let mut out = vec![T::zero(); g.c * g.k * g.k * cols];
    let c_of = |r: usize| r / (g.k * g.k);
    g.for_each_row(b, ho, |r, n, oy, iy, kx| {
        let (lo, hi) = g.valid_ox(kx, wo);
        let src = ((n * g.c + c_of(r)) * g.h + iy) * g.w;
        let dst = &mut out[r * cols + (n * ho + oy) * wo..][..wo];
        for ox in lo..hi {
            dst[ox] = x[src + ox * g.stride + kx - g.padding];
        }
    });
    out
}

fn fold<T: WithDType>(g: &Geometry, b: usize, col: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = b * ho * wo;
    let mut out = vec![T::zero(); b * g.c * g.h * g.w];
    let c_of = |r: usize| r / (g.k * g.k);
    g.for_each_row(b, ho, |r, n, oy, iy, kx| {
        let (lo, hi) = g.valid_ox(kx, wo);
        let dst = ((n * g.c + c_of(r)) * g.h + iy) * g.w;
        let src = &col[r * cols + (n * ho + oy) * wo..][..wo];
        for ox in lo..hi {
            out[dst + ox * g.stride + kx - g.padding] += src[ox];
        }
    });
    out
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, c, h, w) = l.shape().dims4()?;
        if (c, h, w) != (g.c, g.h, g.w) {
            candle_core::bail!("unfold: geometry mismatch");
        }
        let (ho, wo) = g.out_hw();
        let shape = Shape::from((c * g.k * g.k, b * ho * wo));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(g, b, contiguous_slice(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(g, b, contiguous_slice(v, l)?)),
            _ => candle_core::bail!("unfold: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (_, cols) = l.shape().dims2()?;
        let (ho, wo) = g.out_hw();
        let b = cols / (ho * wo);
        let shape = Shape::from((b, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(fold(g, b, contiguous_slice(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(g, b, contiguous_slice(v, l)?)),
            _ => candle_core::bail!("fold: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }
}

/// Cross-correlation of `x: [B, C, H, W]` with `kernel: [Co, C, k, k]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, padding: usize, stride: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = kernel.dims4()?;
    if ci != c || k != k2 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        candle_core::bail!("conv2d: input {:?} incompatible with kernel {:?}", x.dims(), kernel.dims());
    }
    let g = Geometry {
        c,
        h,
        w,
        k,
        stride,
        padding,
    };
    let (ho, wo) = g.out_hw();
    let col = if k == 1 && stride == 1 && padding == 0 {
        x.transpose(0, 1)?.reshape((c, b * h * w))?
    } else {
        x.contiguous()?.apply_op1(Unfold(g))?
    };
    let wm = kernel.reshape((co, c * k * k))?;
    wm.matmul(&col)?.reshape((co, b, ho, wo))?.transpose(0, 1)?.contiguous()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        crate::tensor_util::randn(shape, 1.0, &mut rng, DType::F64, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_direct_convolution() {
        for (k, stride, padding, h) in [(3, 1, 1, 7), (3, 2, 1, 8), (1, 1, 0, 5), (3, 1, 0, 6), (1, 2, 0, 6)] {
            let x = rand(&[2, 3, h, h + 1], 1);
            let w = rand(&[4, 3, k, k], 2);
            let ours = conv2d(&x, &w, padding, stride).unwrap();
            let reference = x.conv2d(&w, padding, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12, "k{k} s{stride} p{padding}");
        }
    }

    #[test]
    fn gradients_match_direct_convolution() {
        for (k, stride, padding) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let x = Var::from_tensor(&rand(&[2, 2, 6, 6], 3)).unwrap();
            let w = Var::from_tensor(&rand(&[3, 2, k, k], 4)).unwrap();
            let probe = rand(&[2, 3, (6 + 2 * padding - k) / stride + 1, (6 + 2 * padding - k) / stride + 1], 5);
            let ours = (conv2d(&x, &w, padding, stride).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let theirs = (x.conv2d(&w, padding, stride, 1, 1).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), w.as_tensor()] {
                assert!(max_diff(ours.get(v).unwrap(), theirs.get(v).unwrap()) < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        assert!(conv2d(&rand(&[1, 2, 4, 4], 0), &rand(&[1, 3, 3, 3], 0), 1, 1).is_err());
    }
}
