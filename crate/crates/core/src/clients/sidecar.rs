//! Planted ground truth stored next to each synthetic image as
//! `<stem>.truth.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::scene::ShapeKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthObject {
    pub label: String,
    pub caption: String,
    pub bbox: [u32; 4],
    pub score: f64,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    /// Metric depth of the object's front face.
    pub depth: f64,
}

/// `d(u, v) = base + gx·(u + ½)/W + gy·(v + ½)/H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRamp {
    pub base: f64,
    pub gx: f64,
    pub gy: f64,
}

impl Default for DepthRamp {
    /// A ground plane receding towards the top of the image.
    fn default() -> Self {
        Self {
            base: 6.0,
            gx: 0.0,
            gy: -4.0,
        }
    }
}

impl DepthRamp {
    pub fn at(&self, u: usize, v: usize, width: usize, height: usize) -> f64 {
        self.base + self.gx * (u as f64 + 0.5) / width as f64 + self.gy * (v as f64 + 0.5) / height as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub schema: u32,
    pub width: u32,
    pub height: u32,
    /// What a perfect tagger would report, in first-appearance order.
    pub labels: Vec<String>,
    /// Back to front, in painting order.
    pub objects: Vec<TruthObject>,
    pub depth: DepthRamp,
}

pub fn sidecar_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.truth.json"))
}

impl Truth {
    pub fn load_for(image: &Path) -> Result<Self> {
        let path = sidecar_path(image);
        if !path.exists() {
            return Err(Error::NotFound(format!("sidecar {}", path.display())));
        }
        let bytes = std::fs::read(&path).at(&path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save_for(&self, image: &Path) -> Result<()> {
        let path = sidecar_path(image);
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).at(&path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_uses_stem() {
        assert_eq!(sidecar_path(Path::new("/a/scene_0001.png")), PathBuf::from("/a/scene_0001.truth.json"));
    }

    #[test]
    fn ramp_closed_form() {
        let r = DepthRamp { base: 2.0, gx: 1.0, gy: -1.0 };
        assert!((r.at(0, 0, 4, 2) - (2.0 + 0.125 - 0.25)).abs() < 1e-12);
    }
}
