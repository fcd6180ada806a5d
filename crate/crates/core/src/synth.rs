//! Synthetic scene corpus with planted ground-truth sidecars.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clients::sidecar::{DepthRamp, Truth, TruthObject};
use crate::error::{Error, IoContext, Result};
use crate::scene::{self, Background, Shape, CATALOG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    /// Objects per image, drawn uniformly from `[min_objects, max_objects]`.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Chance that an object repeats an earlier label of the same image.
    pub repeat_prob: f64,
    /// Chance that an object gets a detector score below the default
    /// acceptance threshold.
    pub low_score_prob: f64,
    /// Restricts classes to these catalogue labels; empty means all.
    pub labels: Vec<String>,
    pub noise_amp: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 1,
            max_objects: 4,
            repeat_prob: 0.3,
            low_score_prob: 0.1,
            labels: Vec::new(),
            noise_amp: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::config("synth size must be at least 32"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 6 {
            return Err(Error::config("synth needs 1 <= min_objects <= max_objects <= 6"));
        }
        for p in [self.repeat_prob, self.low_score_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("synth probabilities must lie in [0, 1]"));
            }
        }
        if let Some(l) = self.labels.iter().find(|l| scene::catalog_entry(l).is_none()) {
            return Err(Error::config(format!("synth label {l:?} is not in the catalogue")));
        }
        Ok(())
    }
}

fn place<R: Rng + ?Sized>(rng: &mut R, size: f64, placed: &[Shape], mut shape: Shape) -> Option<Shape> {
    for _ in 0..200 {
        let r = rng.random_range(size * 0.08..size * 0.14);
        shape.radius = r;
        shape.cx = rng.random_range(r + 1.0..size - r - 1.0);
        shape.cy = rng.random_range(r + 1.0..size - r - 1.0);
        let clear = placed
            .iter()
            .all(|o| (o.cx - shape.cx).abs() > o.radius + r + 1.0 || (o.cy - shape.cy).abs() > o.radius + r + 1.0);
        if clear {
            return Some(shape);
        }
    }
    None
}

/// One scene and its sidecar.
pub fn synth_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig) -> Result<(image::RgbImage, Truth)> {
    let n = cfg.size;
    let classes: Vec<&scene::CatalogEntry> = if cfg.labels.is_empty() {
        CATALOG.iter().collect()
    } else {
        CATALOG.iter().filter(|e| cfg.labels.iter().any(|l| l == e.label)).collect()
    };
    let bg = Background::random(rng, n, n, cfg.noise_amp);
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut shapes: Vec<Shape> = Vec::new();
    let mut objects: Vec<TruthObject> = Vec::new();
    for _ in 0..count {
        let entry = match objects.last() {
            Some(_) if rng.random_bool(cfg.repeat_prob) => {
                let prev = objects.choose(rng).expect("non-empty").label.clone();
                scene::catalog_entry(&prev).expect("catalogue label")
            }
            _ => *classes.choose(rng).ok_or_else(|| Error::config("no synth classes"))?,
        };
        let template = Shape {
            kind: entry.shape,
            rgb: entry.color,
            cx: 0.0,
            cy: 0.0,
            radius: 0.0,
        };
        let Some(shape) = place(rng, n as f64, &shapes, template) else {
            continue;
        };
        let bbox = shape
            .mask(n, n)
            .bbox()
            .ok_or_else(|| Error::invalid("placed shape covers no pixel"))?;
        let score = if rng.random_bool(cfg.low_score_prob) {
            rng.random_range(0.1..0.3)
        } else {
            rng.random_range(0.5..1.0)
        };
        objects.push(TruthObject {
            label: entry.label.to_string(),
            caption: entry.captions.choose(rng).expect("captions").to_string(),
            bbox: bbox.to_array(),
            score,
            shape: shape.kind,
            color: shape.rgb,
            depth: rng.random_range(2.0..6.0),
        });
        shapes.push(shape);
    }
    let pixels = scene::render(&bg, &shapes, n, n);
    let mut labels: Vec<String> = Vec::new();
    for o in &objects {
        if !labels.contains(&o.label) {
            labels.push(o.label.clone());
        }
    }
    let truth = Truth {
        schema: 1,
        width: n as u32,
        height: n as u32,
        labels,
        objects,
        depth: DepthRamp {
            base: rng.random_range(5.0..8.0),
            gx: rng.random_range(-0.5..0.5),
            gy: -rng.random_range(2.0..4.0),
        },
    };
    Ok((scene::to_rgb_image(&pixels, n, n), truth))
}

/// Writes `scene_NNNN.png` and `scene_NNNN.truth.json` for `i < n`.
pub fn synth_corpus(n: usize, seed: u64, out: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::config("synth needs n >= 1"));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).at(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let (img, truth) = synth_scene(&mut rng, cfg)?;
        let path = out.join(format!("scene_{i:04}.png"));
        let bytes = crate::imaging::png_bytes(&img)?;
        std::fs::write(&path, bytes).at(&path)?;
        truth.save_for(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objects_per_image_follow_config() {
        let cfg = SynthConfig {
            min_objects: 2,
            max_objects: 4,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 7];
        let trials = 600;
        for _ in 0..trials {
            let (_, t) = synth_scene(&mut rng, &cfg).unwrap();
            counts[t.objects.len()] += 1;
        }
        assert_eq!(counts[0] + counts[1] + counts[5] + counts[6], 0);
        for c in &counts[2..=4] {
            let share = *c as f64 / trials as f64;
            assert!((share - 1.0 / 3.0).abs() < 0.06, "{counts:?}");
        }
    }

    #[test]
    fn boxes_match_painted_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, t) = synth_scene(&mut rng, &SynthConfig::default()).unwrap();
        for o in &t.objects {
            let [x0, y0, x1, y1] = o.bbox;
            let inside = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).filter(|&(x, y)| img.get_pixel(x, y).0 == o.color).count();
            assert!(inside > 0);
            assert!(x1 as usize <= img.width() as usize && y1 <= img.height());
        }
        let labels: std::collections::BTreeSet<_> = t.objects.iter().map(|o| o.label.clone()).collect();
        assert_eq!(labels.len(), t.labels.len());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SynthConfig { min_objects: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { labels: vec!["unicorn".into()], ..Default::default() }.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(synth_corpus(0, 1, dir.path(), &SynthConfig::default()).is_err());
    }
}
