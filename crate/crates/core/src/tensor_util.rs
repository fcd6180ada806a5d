//! Small helpers shared by the tensor-based modules.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Gaussian tensor drawn from a caller-owned RNG, so results do not depend on
/// any backend-global seed.
pub fn randn<R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Fails with the offending context when any entry is NaN or infinite.
pub fn ensure_finite(t: &Tensor, context: &str) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// SHA-256 over named tensors in name order: name bytes, shape, then
/// little-endian f32 payload.
pub fn hash_named<'a, I>(tensors: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut items: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}
