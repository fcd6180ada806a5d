//! Training on `L = ‖ε − ε_θ(z_t, t, c_c, c_t)‖²`, averaged over the batch.

use std::io::Write;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::PairDataset;
use super::schedule::{add_noise, NoiseSchedule};
use super::EpsModel;
use crate::error::{Error, Result};
use crate::tensor_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay over
    /// the loop; 1 keeps it constant.
    pub final_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            final_lr_ratio: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::config("final_lr_ratio must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// Targets scaled to `[-1, 1]`.
    pub z0: Tensor,
    pub control: Tensor,
    pub text_cond: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl TrainBatch {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let b = self.z0.dim(0)?;
        if self.eps.dims() != self.z0.dims() {
            return Err(Error::invalid("batch eps and z0 shapes differ"));
        }
        for (name, n) in [
            ("control", self.control.dim(0)?),
            ("text_cond", self.text_cond.dim(0)?),
            ("t", self.t.len()),
        ] {
            if n != b {
                return Err(Error::invalid(format!("batch {name} has {n} rows, z0 has {b}")));
            }
        }
        if let Some(&t) = self.t.iter().find(|&&t| t >= sched.steps()) {
            return Err(Error::invalid(format!("timestep {t} outside [0, {})", sched.steps())));
        }
        Ok(())
    }
}

/// Mean squared error between the sampled and predicted noise.
pub fn diffusion_loss<M: EpsModel + ?Sized>(model: &M, batch: &TrainBatch, sched: &NoiseSchedule) -> Result<Tensor> {
    batch.validate(sched)?;
    let z_t = add_noise(&batch.z0, &batch.eps, &batch.t, sched)?;
    let pred = model.predict(&z_t, &batch.t, &batch.control, &batch.text_cond)?;
    Ok((pred - &batch.eps)?.sqr()?.mean_all()?)
}

pub struct Trainer {
    opt: AdamW,
    vars: Vec<(String, Var)>,
    steps_taken: usize,
}

impl Trainer {
    pub fn new<M: EpsModel + ?Sized>(model: &M, cfg: &OptimConfig) -> Result<Self> {
        let vars = model.trainable();
        if vars.is_empty() {
            return Err(Error::invalid("model has no trainable parameters"));
        }
        let params = ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        let opt = AdamW::new(vars.iter().map(|(_, v)| v.clone()).collect(), params)?;
        Ok(Self {
            opt,
            vars,
            steps_taken: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// One optimizer update; returns the pre-update loss.
    pub fn training_step<M: EpsModel + ?Sized>(
        &mut self,
        model: &M,
        batch: &TrainBatch,
        sched: &NoiseSchedule,
    ) -> Result<f64> {
        let loss = diffusion_loss(model, batch, sched)?;
        let value = tensor_util::scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at step {} (timesteps {:?})",
                self.steps_taken, batch.t
            )));
        }
        let grads = loss.backward()?;
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                let norm = g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {name} at step {}",
                        self.steps_taken
                    )));
                }
            }
        }
        self.opt.step(&grads)?;
        model.after_update()?;
        self.steps_taken += 1;
        Ok(value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Draws a batch of training pairs with fresh timesteps and noise.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &PairDataset,
    batch_size: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainBatch> {
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..data.len())).collect();
    let (z0, control, text_cond) = data.gather(&idx)?;
    let t = (0..batch_size).map(|_| rng.random_range(0..sched.steps())).collect();
    let eps = tensor_util::randn(z0.dims(), 1.0, rng, z0.dtype(), z0.device())?;
    Ok(TrainBatch {
        z0,
        control,
        text_cond,
        t,
        eps,
    })
}

/// Cosine decay from `lr` at step 0 to `lr · final_lr_ratio` at the last step.
pub fn cosine_lr(cfg: &OptimConfig, step: usize, steps: usize) -> f64 {
    let progress = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
    let ratio = cfg.final_lr_ratio + (1.0 - cfg.final_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr * ratio
}

/// Runs `cfg.steps` updates, logging `step,loss` CSV lines to `log`.
pub fn train<M: EpsModel + ?Sized>(
    model: &M,
    data: &PairDataset,
    sched: &NoiseSchedule,
    optim: &OptimConfig,
    cfg: &LoopConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(model, optim)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step,loss").map_err(|e| Error::io("train log", e))?;
    }
    for step in 0..cfg.steps {
        trainer.set_lr(cosine_lr(optim, step, cfg.steps));
        let batch = sample_batch(data, cfg.batch_size, sched, &mut rng)?;
        let loss = trainer.training_step(model, &batch, sched)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{step},{loss}").map_err(|e| Error::io("train log", e))?;
        }
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleConfig;
    use candle_core::{DType, Device};

    #[test]
    fn cosine_lr_endpoints() {
        let cfg = OptimConfig {
            final_lr_ratio: 0.1,
            ..OptimConfig::default()
        };
        assert_eq!(cosine_lr(&cfg, 0, 100), 1e-3);
        assert!((cosine_lr(&cfg, 99, 100) - 1e-4).abs() < 1e-12);
        assert!((cosine_lr(&cfg, 33, 67) - 5.5e-4).abs() < 1e-12);
        assert_eq!(cosine_lr(&OptimConfig::default(), 40, 100), 1e-3);
        assert!(OptimConfig { final_lr_ratio: 1.5, ..OptimConfig::default() }.validate().is_err());
    }

    struct Oracle(Tensor);

    impl EpsModel for Oracle {
        fn predict(&self, _z: &Tensor, _t: &[usize], _c: &Tensor, _x: &Tensor) -> Result<Tensor> {
            Ok(self.0.clone())
        }
        fn trainable(&self) -> Vec<(String, Var)> {
            Vec::new()
        }
    }

    fn batch() -> TrainBatch {
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let z0 = tensor_util::randn(&[2, 3, 4, 4], 0.5, &mut rng, DType::F32, &dev).unwrap();
        let eps = tensor_util::randn(&[2, 3, 4, 4], 1.0, &mut rng, DType::F32, &dev).unwrap();
        TrainBatch {
            control: z0.clone(),
            text_cond: Tensor::zeros((2, 4), DType::F32, &dev).unwrap(),
            z0,
            t: vec![0, 17],
            eps,
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let b = batch();
        let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let loss = diffusion_loss(&Oracle(b.eps.clone()), &b, &sched).unwrap();
        assert_eq!(tensor_util::scalar_f64(&loss).unwrap(), 0.0);
        let loss = diffusion_loss(&Oracle(b.eps.zeros_like().unwrap()), &b, &sched).unwrap();
        assert!(tensor_util::scalar_f64(&loss).unwrap() > 0.0);
    }

    #[test]
    fn rejects_out_of_range_timestep() {
        let mut b = batch();
        b.t[1] = 200;
        let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert!(diffusion_loss(&Oracle(b.eps.clone()), &b, &sched).is_err());
    }

    #[test]
    fn nothing_to_train_is_an_error() {
        let b = batch();
        assert!(Trainer::new(&Oracle(b.eps), &OptimConfig::default()).is_err());
    }
}
