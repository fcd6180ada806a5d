//! Per-object acceptance predicates: size, keyword and semantic. Each is a
//! pure function of one record, so the kept set does not depend on the
//! order they run in.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::types::ObjectRecord;
use crate::clients::{EmbedItem, Embedder};
use crate::error::{Error, IoContext, Result};
use crate::metrics::cosine;

const STARTER_BLOCKLIST: &str = include_str!("../../assets/blocklist.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualityBounds {
    /// Upper bound on luma variance inside the filled region.
    pub max_variance: f64,
    /// Upper bound on the fraction of canny edge pixels inside the region.
    pub max_edge_density: f64,
}

impl Default for QualityBounds {
    fn default() -> Self {
        Self {
            max_variance: 0.02,
            max_edge_density: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterPolicy {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    /// Blocklist file, one token per line. Relative paths resolve against
    /// the policy file. Unset uses the shipped starter list.
    pub blocklist_file: Option<PathBuf>,
    pub clip_accept_threshold: f64,
    pub dilation_kernel: usize,
    pub detector_score_threshold: f64,
    pub quality: QualityBounds,
    /// Emit multi-instance samples for classes with several kept objects.
    pub multi_instance: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_area_fraction: 0.0018,
            max_area_fraction: 0.5,
            blocklist_file: None,
            clip_accept_threshold: 0.2,
            dilation_kernel: 15,
            detector_score_threshold: 0.35,
            quality: QualityBounds::default(),
            multi_instance: true,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_area_fraction && self.min_area_fraction < self.max_area_fraction && self.max_area_fraction <= 1.0) {
            return Err(Error::config(format!(
                "area bounds need 0 < min < max <= 1, got {} and {}",
                self.min_area_fraction, self.max_area_fraction
            )));
        }
        if self.dilation_kernel == 0 || self.dilation_kernel % 2 == 0 {
            return Err(Error::config(format!("dilation_kernel must be odd, got {}", self.dilation_kernel)));
        }
        if !(-1.0..=1.0).contains(&self.clip_accept_threshold) {
            return Err(Error::config("clip_accept_threshold must be a cosine in [-1, 1]"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut p: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if let Some(b) = &p.blocklist_file {
            if b.is_relative() {
                p.blocklist_file = Some(path.parent().unwrap_or(Path::new(".")).join(b));
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn blocklist(&self) -> Result<Blocklist> {
        match &self.blocklist_file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("blocklist {}: {e}", p.display())))?;
                Ok(Blocklist::parse(&text))
            }
            None => Ok(Blocklist::starter()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Blocklist(BTreeSet<String>);

impl Blocklist {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn starter() -> Self {
        Self::parse(STARTER_BLOCKLIST)
    }

    pub fn from_tokens<I: IntoIterator<Item = S>, S: AsRef<str>>(tokens: I) -> Self {
        Self(tokens.into_iter().map(|t| t.as_ref().trim().to_lowercase()).collect())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Inclusive bounds: the thresholds themselves are kept.
pub fn filter_by_size(obj: &ObjectRecord, pol: &FilterPolicy) -> bool {
    pol.min_area_fraction <= obj.area_fraction && obj.area_fraction <= pol.max_area_fraction
}

pub fn filter_by_keywords(obj: &ObjectRecord, blocklist: &Blocklist) -> bool {
    !obj.label
        .split(|c: char| !c.is_alphanumeric())
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .any(|t| blocklist.contains(&t))
}

/// Keeps the object iff the pre-removal crop matches its label at least as
/// well as `tau` and the post-removal crop matches strictly worse. Both
/// scores are stored on the record.
pub fn semantic_filter(
    obj: &mut ObjectRecord,
    crop_pre: &RgbImage,
    crop_post: &RgbImage,
    embedder: &dyn Embedder,
    tau: f64,
) -> Result<bool> {
    let label = embedder.embed(EmbedItem::Text(&obj.label))?;
    let pre = cosine(&embedder.embed(EmbedItem::Image(crop_pre))?, &label)?;
    let post = cosine(&embedder.embed(EmbedItem::Image(crop_post))?, &label)?;
    obj.clip_pre = pre;
    obj.clip_post = Some(post);
    Ok(semantic_rule(pre, post, tau))
}

pub fn semantic_rule(pre: f64, post: f64, tau: f64) -> bool {
    pre >= tau && post < pre
}
