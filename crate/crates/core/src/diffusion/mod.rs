//! Pixel-space diffusion at desk scale: schedule, toy U-Net, training on
//! the ε-prediction objective and a deterministic DDIM sampler.

pub mod dataset;
pub mod experiment;
pub mod runs;
pub mod sample;
pub mod schedule;
pub mod text;
pub mod train;
pub mod unet;

use candle_core::{Tensor, Var};

use crate::error::Result;

pub use schedule::{add_noise, NoiseSchedule, ScheduleConfig};
pub use text::{embed_text, TextEmbedder};
pub use unet::{BaseUnet, UNetConfig};

/// A noise predictor `ε_θ(z_t, t, c_c, c_t)`.
pub trait EpsModel {
    fn predict(&self, z_t: &Tensor, ts: &[usize], control: &Tensor, text: &Tensor) -> Result<Tensor>;

    /// Parameters an optimizer may update.
    fn trainable(&self) -> Vec<(String, Var)>;

    /// Hook run after every optimizer update.
    fn after_update(&self) -> Result<()> {
        Ok(())
    }
}

/// The base model on its own ignores the control input and has nothing to
/// train.
impl EpsModel for BaseUnet {
    fn predict(&self, z_t: &Tensor, ts: &[usize], _control: &Tensor, text: &Tensor) -> Result<Tensor> {
        self.forward(z_t, ts, text)
    }

    fn trainable(&self) -> Vec<(String, Var)> {
        Vec::new()
    }
}

/// A base model under pretraining, with its parameters held as variables.
pub struct TrainableBase {
    pub net: BaseUnet,
    pub varmap: candle_nn::VarMap,
}

impl TrainableBase {
    pub fn new(config: &UNetConfig, seed: u64, device: &candle_core::Device) -> Result<Self> {
        let varmap = candle_nn::VarMap::new();
        let pb = crate::nn::ParamBuilder::trainable(&varmap, seed, candle_core::DType::F32, device);
        let net = BaseUnet::new(&pb, config)?;
        Ok(Self { net, varmap })
    }

    /// Detached copies of the current weights, ready to be frozen.
    pub fn freeze(&self) -> Result<std::collections::HashMap<String, Tensor>> {
        crate::nn::snapshot(&self.varmap)
    }
}

impl EpsModel for TrainableBase {
    fn predict(&self, z_t: &Tensor, ts: &[usize], _control: &Tensor, text: &Tensor) -> Result<Tensor> {
        self.net.forward(z_t, ts, text)
    }

    fn trainable(&self) -> Vec<(String, Var)> {
        crate::nn::sorted_vars(&self.varmap)
    }
}
