//! Deterministic DDIM sampling (η = 0) with clipped `x̂₀`.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::NoiseSchedule;
use super::EpsModel;
use crate::error::{Error, Result};
use crate::tensor_util;

/// Evenly spaced timesteps, descending, always ending at 0.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!("sampling steps must be in [1, {total}], got {steps}")));
    }
    let mut ts: Vec<usize> = (0..steps).map(|i| i * total / steps).collect();
    ts.reverse();
    Ok(ts)
}

/// Generates `[B, C, H, W]` images in `[-1, 1]` from seeded initial noise.
/// `shape` is the latent shape; control and text are per batch element.
pub fn sample<M: EpsModel + ?Sized>(
    model: &M,
    control: &Tensor,
    text_cond: &Tensor,
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let ts = ddim_timesteps(sched.steps(), steps)?;
    let b = shape[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = tensor_util::randn(shape, 1.0, &mut rng, control.dtype(), control.device())?;
    let mut x0 = x.clone();
    for (k, &t) in ts.iter().enumerate() {
        let eps = model.predict(&x, &vec![t; b], control, text_cond)?.detach();
        let ab = sched.alpha_bar(t)?;
        x0 = ((&x - eps.affine((1.0 - ab).sqrt(), 0.0)?)? / ab.sqrt())?.clamp(-1f32, 1f32)?;
        if let Some(&prev) = ts.get(k + 1) {
            let ab_prev = sched.alpha_bar(prev)?;
            // ε re-derived from the clipped x̂₀ keeps |x| bounded even
            // when the raw prediction overshoots.
            let eps = ((&x - x0.affine(ab.sqrt(), 0.0)?)? / (1.0 - ab).sqrt())?;
            x = (x0.affine(ab_prev.sqrt(), 0.0)? + eps.affine((1.0 - ab_prev).sqrt(), 0.0)?)?;
        }
    }
    tensor_util::ensure_finite(&x0, "sampled image")?;
    Ok(x0)
}
