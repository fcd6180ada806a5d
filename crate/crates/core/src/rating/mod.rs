//! Blind human rating: sessions over a fixed sample set, anonymized
//! candidates, a durable rating log and the per-model average table.

pub mod http;
pub mod report;
pub mod service;
pub mod store;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::pipeline::types::Task;

pub use report::{aggregate, RatingReport};
pub use service::RatingService;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelTag {
    #[serde(rename = "IP2P")]
    Ip2p,
    #[serde(rename = "Inst-Inpaint")]
    InstInpaint,
    #[serde(rename = "PIPE")]
    Pipe,
    #[serde(rename = "GalaxyEdit")]
    GalaxyEdit,
    #[serde(rename = "ground_truth")]
    GroundTruth,
}

impl ModelTag {
    pub const ALL: [ModelTag; 5] = [
        ModelTag::Ip2p,
        ModelTag::InstInpaint,
        ModelTag::Pipe,
        ModelTag::GalaxyEdit,
        ModelTag::GroundTruth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelTag::Ip2p => "IP2P",
            ModelTag::InstInpaint => "Inst-Inpaint",
            ModelTag::Pipe => "PIPE",
            ModelTag::GalaxyEdit => "GalaxyEdit",
            ModelTag::GroundTruth => "ground_truth",
        }
    }

    /// Lowercase needles a blindness audit searches for.
    pub fn needles() -> Vec<String> {
        let mut v: Vec<String> = Self::ALL.iter().map(|m| m.name().to_lowercase()).collect();
        v.extend(["instinpaint", "ground truth", "groundtruth", "model_tag"].map(String::from));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleCandidate {
    pub model: ModelTag,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleItem {
    pub item_id: String,
    pub task: Task,
    pub source: String,
    pub instruction: String,
    pub candidates: Vec<SampleCandidate>,
}

/// The evaluation set. Image paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub items: Vec<SampleItem>,
    pub root: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    items: Vec<SampleItem>,
}

impl SampleSet {
    pub fn new(items: Vec<SampleItem>, root: PathBuf) -> Result<Self> {
        let s = Self { items, root };
        s.validate()?;
        Ok(s)
    }

    /// Reads `{"items": [...]}`; images resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        let f: SampleFile = serde_json::from_slice(&bytes).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let root = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        Self::new(f.items, root)
    }

    fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::config("the rating sample set is empty"));
        }
        let needles = ModelTag::needles();
        let mut ids = BTreeSet::new();
        for it in &self.items {
            if !ids.insert(it.item_id.as_str()) {
                return Err(Error::config(format!("duplicate item id {:?}", it.item_id)));
            }
            let lower = format!("{} {}", it.item_id, it.instruction).to_lowercase();
            if it.item_id.is_empty() || !it.item_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::config(format!("item id {:?} must be non-empty [A-Za-z0-9_-]", it.item_id)));
            }
            if needles.iter().any(|n| lower.contains(n.as_str())) {
                return Err(Error::config(format!("item {:?} would reveal a model name", it.item_id)));
            }
            if it.candidates.is_empty() {
                return Err(Error::config(format!("item {:?} has no candidates", it.item_id)));
            }
            let models: BTreeSet<_> = it.candidates.iter().map(|c| c.model).collect();
            if models.len() != it.candidates.len() {
                return Err(Error::config(format!("item {:?} lists a model twice", it.item_id)));
            }
            for rel in std::iter::once(&it.source).chain(it.candidates.iter().map(|c| &c.image)) {
                let p = self.resolve(rel)?;
                if !p.is_file() {
                    return Err(Error::config(format!("missing media file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Joins a relative media path onto the root, refusing escapes.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::config(format!("media path {rel:?} must stay inside the sample directory")));
        }
        Ok(self.root.join(p))
    }

    pub fn item(&self, id: &str) -> Option<&SampleItem> {
        self.items.iter().find(|i| i.item_id == id)
    }
}
