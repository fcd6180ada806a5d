//! Linear-beta noise schedule and the forward noising process.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// The usual 1e-4..0.02 over 1000 steps, rescaled to 200 steps.
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alphas_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Ok(Self { betas, alphas_bar })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [0, {})", self.steps())))
    }

    /// Per-sample `[B, 1, 1, 1]` coefficient tensors `(√ᾱ_t, √(1-ᾱ_t))`.
    pub fn coefficients(&self, ts: &[usize], device: &Device) -> Result<(Tensor, Tensor)> {
        let mut a = Vec::with_capacity(ts.len());
        let mut s = Vec::with_capacity(ts.len());
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            a.push(ab.sqrt() as f32);
            s.push((1.0 - ab).sqrt() as f32);
        }
        let shape = (ts.len(), 1, 1, 1);
        Ok((Tensor::from_vec(a, shape, device)?, Tensor::from_vec(s, shape, device)?))
    }
}

/// `z_t = √ᾱ_t·z0 + √(1-ᾱ_t)·eps`, one timestep per batch element.
pub fn add_noise(z0: &Tensor, eps: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::invalid(format!(
            "add_noise: z0 {:?} and eps {:?} differ in shape",
            z0.dims(),
            eps.dims()
        )));
    }
    let b = z0.dim(0)?;
    if b != ts.len() {
        return Err(Error::shape("add_noise", "batch size", b, ts.len()));
    }
    let (a, s) = sched.coefficients(ts, z0.device())?;
    let a = a.to_dtype(z0.dtype())?;
    let s = s.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_util;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alphas_bar_is_the_cumulative_product() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.alphas_bar()[0], 1.0 - s.betas()[0]);
        let mut prod = 1.0;
        for t in 0..s.steps() {
            prod *= 1.0 - s.betas()[t];
            assert!((s.alphas_bar()[t] - prod).abs() < 1e-12);
            assert!(s.alphas_bar()[t] > 0.0 && s.alphas_bar()[t] < 1.0);
            if t > 0 {
                assert!(s.alphas_bar()[t] < s.alphas_bar()[t - 1]);
            }
        }
    }

    #[test]
    fn rejects_bad_timestep() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        let z = Tensor::zeros((1, 1, 1, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(add_noise(&z, &z, &[10], &s).is_err());
    }

    #[test]
    fn zero_noise_and_zero_signal() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = tensor_util::randn(&[2, 3, 4, 4], 1.0, &mut rng, DType::F32, &Device::Cpu).unwrap();
        let zero = z0.zeros_like().unwrap();
        let ts = [7, 31];
        let zt = tensor_util::to_f64_vec(&add_noise(&z0, &zero, &ts, &s).unwrap()).unwrap();
        let z0v = tensor_util::to_f64_vec(&z0).unwrap();
        let per = 3 * 16;
        for (i, (a, b)) in zt.iter().zip(&z0v).enumerate() {
            let c = s.alpha_bar(ts[i / per]).unwrap().sqrt();
            assert!((a - c * b).abs() < 1e-6);
        }
        let zt = tensor_util::to_f64_vec(&add_noise(&zero, &z0, &ts, &s).unwrap()).unwrap();
        for (i, (a, b)) in zt.iter().zip(&z0v).enumerate() {
            let c = (1.0 - s.alpha_bar(ts[i / per]).unwrap()).sqrt();
            assert!((a - c * b).abs() < 1e-6);
        }
    }

    #[test]
    fn monte_carlo_variance() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let t = 120;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z0 = Tensor::full(0.7f32, (n, 1, 1, 1), &Device::Cpu).unwrap();
        let eps = tensor_util::randn(&[n, 1, 1, 1], 1.0, &mut rng, DType::F32, &Device::Cpu).unwrap();
        let zt = tensor_util::to_f64_vec(&add_noise(&z0, &eps, &vec![t; n], &s).unwrap()).unwrap();
        let mean = zt.iter().sum::<f64>() / n as f64;
        let var = zt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 1.0 - s.alpha_bar(t).unwrap();
        // Sample variance of a Gaussian has std σ²·√(2/(n-1)).
        let tol = 3.0 * expected * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() < tol, "var {var} expected {expected} tol {tol}");
    }
}
