//! One TOML file for a whole run. Unknown keys are rejected at every level.
//!
//! ```toml
//! seed = 7
//! images = 8
//!
//! [policy]
//! dilation_kernel = 9
//!
//! [clients]
//! depth = "mock"
//!
//! [train]
//! steps = 200
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::config::{ClientsConfig, ProvidersConfig};
use crate::diffusion::runs::TrainConfig;
use crate::error::{Error, Result};
use crate::instructions::spatial::DEFAULT_MARGIN;
use crate::pipeline::filters::FilterPolicy;
use crate::pipeline::types::Strategy;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstructionsConfig {
    pub strategies: Vec<Strategy>,
    pub margin: f64,
}

impl Default for InstructionsConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Simple, Strategy::Attribute, Strategy::Spatial, Strategy::Multi],
            margin: DEFAULT_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 20, batch: 16 }
    }
}

/// Defaults are the 8-image smoke run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Size of the synthetic corpus.
    pub images: usize,
    pub synth: SynthConfig,
    pub policy: FilterPolicy,
    pub clients: ClientsConfig,
    pub providers: ProvidersConfig,
    pub instructions: InstructionsConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 8,
            synth: SynthConfig::default(),
            policy: FilterPolicy::default(),
            clients: ClientsConfig::default(),
            providers: ProvidersConfig::default(),
            instructions: InstructionsConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 {
            return Err(Error::config("images must be at least 1"));
        }
        self.synth.validate()?;
        self.policy.validate()?;
        self.clients.validate()?;
        self.train.validate()?;
        if self.instructions.strategies.is_empty() {
            return Err(Error::config("at least one instruction strategy is required"));
        }
        if !(self.instructions.margin >= 0.0 && self.instructions.margin.is_finite()) {
            return Err(Error::config("instruction margin must be finite and >= 0"));
        }
        if self.sample.steps == 0 || self.sample.steps > self.train.schedule.steps || self.sample.batch == 0 {
            return Err(Error::config(format!(
                "sample steps must be in [1, {}] and batch positive",
                self.train.schedule.steps
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("{}: {e}", origin.display())))?;
        if let Some(b) = &cfg.policy.blocklist_file {
            if b.is_relative() {
                cfg.policy.blocklist_file = Some(origin.parent().unwrap_or(Path::new(".")).join(b));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    /// SHA-256 of the resolved config's JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        let p = Path::new("run.toml");
        assert!(RunConfig::from_toml("", p).is_ok());
        for bad in ["colour = 1", "[train]\nstepz = 3", "[policy.quality]\nfoo = 1", "[clients]\nradar = \"mock\""] {
            assert!(matches!(RunConfig::from_toml(bad, p), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let p = Path::new("run.toml");
        let a = RunConfig::from_toml("seed = 1", p).unwrap();
        let b = RunConfig::from_toml("seed = 1\nimages = 8", p).unwrap();
        let c = RunConfig::from_toml("seed = 2", p).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn semantic_checks() {
        let p = Path::new("run.toml");
        for bad in ["images = 0", "[sample]\nsteps = 500", "[instructions]\nstrategies = []", "[train]\nsize = 31"] {
            assert!(matches!(RunConfig::from_toml(bad, p), Err(Error::Config(_))), "{bad}");
        }
        let cfg = RunConfig::from_toml("[policy]\nblocklist_file = \"b.txt\"", Path::new("/etc/run.toml")).unwrap();
        assert_eq!(cfg.policy.blocklist_file.as_deref(), Some(Path::new("/etc/b.txt")));
    }
}
