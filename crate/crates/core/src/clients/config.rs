//! Client configuration files.
//!
//! ```toml
//! tagger = "mock"
//!
//! [detector]
//! endpoint = "http://127.0.0.1:8101/detect"
//! timeout_ms = 5000
//! max_retries = 2
//! ```

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use super::ClientKind;
use crate::error::{Error, IoContext, Result};

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    200
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Delay before retry `n` (1-based) is `backoff_base_ms · 2^(n-1)`.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Sustained request rate; 0 disables rate limiting.
    #[serde(default)]
    pub rate_per_sec: f64,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff_ms(),
            auth_token_env: None,
            max_in_flight: default_in_flight(),
            rate_per_sec: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::config("client timeout_ms must be positive"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::config("client max_in_flight must be positive"));
        }
        if !(self.rate_per_sec >= 0.0 && self.rate_per_sec.is_finite()) {
            return Err(Error::config("client rate_per_sec must be finite and non-negative"));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(Error::config(format!("client endpoint {:?} is not an http(s) URL", self.endpoint)));
        }
        Ok(())
    }

    /// Backoff before the `attempt`-th retry (1-based).
    pub fn backoff(&self, attempt: u32) -> std::time::Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        std::time::Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

/// `"mock"` or an HTTP client table.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
#[serde(untagged)]
pub enum ClientSpec {
    #[default]
    #[serde(serialize_with = "ser_mock")]
    Mock,
    Http(ClientConfig),
}

fn ser_mock<S: serde::Serializer>(s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str("mock")
}

impl<'de> Deserialize<'de> for ClientSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Http(ClientConfig),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) if n == "mock" => Ok(ClientSpec::Mock),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "client must be \"mock\" or a table with an endpoint, got {n:?}"
            ))),
            Raw::Http(c) => Ok(ClientSpec::Http(c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    pub tagger: ClientSpec,
    pub detector: ClientSpec,
    pub segmenter: ClientSpec,
    pub captioner: ClientSpec,
    pub inpainter: ClientSpec,
    pub depth: ClientSpec,
    pub embedder: ClientSpec,
    pub llm: ClientSpec,
}

impl ClientsConfig {
    pub fn spec(&self, kind: ClientKind) -> &ClientSpec {
        match kind {
            ClientKind::Tagger => &self.tagger,
            ClientKind::Detector => &self.detector,
            ClientKind::Segmenter => &self.segmenter,
            ClientKind::Captioner => &self.captioner,
            ClientKind::Inpainter => &self.inpainter,
            ClientKind::Depth => &self.depth,
            ClientKind::Embedder => &self.embedder,
            ClientKind::Llm => &self.llm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in ClientKind::ALL {
            if let ClientSpec::Http(c) = self.spec(kind) {
                c.validate().map_err(|e| Error::config(format!("{}: {e}", kind.name())))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Embedding providers used for evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProvidersConfig {
    /// Image and text embeddings (CLIP-I, CLIP-T) and the FID feature space.
    pub clip: ClientSpec,
    /// Image-only embeddings (DINO).
    pub dino: ClientSpec,
}

impl ProvidersConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        for (name, spec) in [("clip", &cfg.clip), ("dino", &cfg.dino)] {
            if let ClientSpec::Http(c) = spec {
                c.validate().map_err(|e| Error::config(format!("{name}: {e}")))?;
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_config() {
        let cfg: ClientsConfig = toml::from_str(
            r#"
tagger = "mock"
[detector]
endpoint = "http://localhost:1/detect"
max_retries = 5
"#,
        )
        .unwrap();
        assert_eq!(cfg.tagger, ClientSpec::Mock);
        assert_eq!(cfg.segmenter, ClientSpec::Mock);
        match &cfg.detector {
            ClientSpec::Http(c) => {
                assert_eq!(c.max_retries, 5);
                assert_eq!(c.timeout_ms, 10_000);
            }
            _ => panic!(),
        }
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_names() {
        assert!(toml::from_str::<ClientsConfig>("taggr = \"mock\"").is_err());
        assert!(toml::from_str::<ClientsConfig>("tagger = \"fake\"").is_err());
        assert!(toml::from_str::<ClientsConfig>("[tagger]\nendpoint = \"http://x\"\nbogus = 1").is_err());
    }

    #[test]
    fn zero_timeout_rejected() {
        let mut c = ClientConfig::new("http://x");
        c.timeout_ms = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn backoff_doubles() {
        let c = ClientConfig {
            backoff_base_ms: 10,
            ..ClientConfig::new("http://x")
        };
        assert_eq!(c.backoff(1).as_millis(), 10);
        assert_eq!(c.backoff(3).as_millis(), 40);
    }

    #[test]
    fn mock_round_trips_through_toml() {
        let cfg = ClientsConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ClientsConfig>(&text).unwrap(), cfg);
    }
}
