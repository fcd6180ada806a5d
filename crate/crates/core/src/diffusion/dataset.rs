//! Synthetic add/remove micro-dataset at 32×32.
//!
//! Each scene is a textured background with one persistent distractor and
//! one edit object. The remove pair maps the full scene to the scene
//! without the edit object; the add pair is its swap.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::text::TextEmbedder;
use crate::error::{Error, Result};
use crate::imaging::Plane;
use crate::pipeline::canny;
use crate::scene::{self, Background, Shape, ShapeKind, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// The source image itself.
    Image,
    /// Canny edges of the source, thresholds drawn per sample.
    Canny,
}

impl Conditioning {
    pub fn channels(&self) -> usize {
        match self {
            Conditioning::Image => 3,
            Conditioning::Canny => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroDatasetConfig {
    pub scenes: usize,
    pub size: usize,
    pub seed: u64,
    pub conditioning: Conditioning,
    /// Scenes (each contributing both pairs) reserved for evaluation.
    pub held_out_scenes: usize,
}

impl Default for MicroDatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 250,
            size: 32,
            seed: 0,
            conditioning: Conditioning::Image,
            held_out_scenes: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditPair {
    pub source: Vec<f32>,
    pub target: Vec<f32>,
    pub control: Vec<f32>,
    pub instruction: String,
}

/// Stacked tensors in `[-1, 1]`, plus the instruction strings.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub source: Tensor,
    pub target: Tensor,
    pub control: Tensor,
    pub text: Tensor,
    pub instructions: Vec<String>,
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, size: usize, avoid: Option<&Shape>) -> (Shape, &'static str) {
    let s = size as f64;
    loop {
        let radius = rng.random_range(s * 0.12..s * 0.2);
        let (name, rgb) = PALETTE[rng.random_range(0..PALETTE.len())];
        let shape = Shape {
            kind: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            rgb,
            cx: rng.random_range(radius + 1.0..s - radius - 1.0),
            cy: rng.random_range(radius + 1.0..s - radius - 1.0),
            radius,
        };
        match avoid {
            Some(o) if (o.cx - shape.cx).hypot(o.cy - shape.cy) < o.radius + shape.radius + 1.0 => continue,
            _ => return (shape, name),
        }
    }
}

fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

pub(crate) fn control_for<R: Rng + ?Sized>(cond: Conditioning, source: &[f32], size: usize, rng: &mut R) -> Result<Vec<f32>> {
    match cond {
        Conditioning::Image => Ok(source.to_vec()),
        Conditioning::Canny => {
            let luma = Plane::from_fn(size, size, |x, y| {
                let i = (y * size + x) * 3;
                0.299 * source[i] + 0.587 * source[i + 1] + 0.114 * source[i + 2]
            });
            let (low, high) = canny::random_thresholds(rng);
            let edges = canny::canny_edges(&luma, low, high)?;
            Ok(edges.data().iter().map(|&e| if e { 1.0 } else { 0.0 }).collect())
        }
    }
}

/// Both pairs of every scene, remove first. Pixel values in `[0, 1]`, HWC.
pub fn generate_pairs(cfg: &MicroDatasetConfig) -> Result<Vec<EditPair>> {
    if cfg.scenes == 0 || cfg.size < 8 {
        return Err(Error::config("micro dataset needs at least one scene of size >= 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let mut pairs = Vec::with_capacity(cfg.scenes * 2);
    for _ in 0..cfg.scenes {
        let bg = Background::random(&mut rng, n, n, 0.03);
        let (distractor, _) = random_shape(&mut rng, n, None);
        let (edit, color) = random_shape(&mut rng, n, Some(&distractor));
        let with = scene::render(&bg, &[distractor, edit], n, n);
        let without = scene::render(&bg, &[distractor], n, n);
        let noun = format!("{color} {}", edit.kind.name());
        let remove = EditPair {
            control: control_for(cfg.conditioning, &with, n, &mut rng)?,
            source: with.clone(),
            target: without.clone(),
            instruction: format!("remove the {noun}"),
        };
        let add = EditPair {
            control: control_for(cfg.conditioning, &without, n, &mut rng)?,
            source: without,
            target: with,
            instruction: format!("add {} {noun}", article(&noun)),
        };
        pairs.push(remove);
        pairs.push(add);
    }
    Ok(pairs)
}

/// HWC `[0, 1]` to CHW `[-1, 1]`.
pub(crate) fn to_chw(pixels: &[f32], channels: usize, size: usize) -> Vec<f32> {
    let mut out = vec![0f32; pixels.len()];
    for i in 0..size * size {
        for c in 0..channels {
            out[c * size * size + i] = pixels[i * channels + c] * 2.0 - 1.0;
        }
    }
    out
}

impl PairDataset {
    pub fn from_pairs(pairs: &[EditPair], size: usize, embedder: &TextEmbedder, device: &Device) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("no pairs"));
        }
        let cc = pairs[0].control.len() / (size * size);
        let stack = |f: &dyn Fn(&EditPair) -> &Vec<f32>, ch: usize| -> Result<Tensor> {
            let mut data = Vec::with_capacity(pairs.len() * ch * size * size);
            for p in pairs {
                data.extend(to_chw(f(p), ch, size));
            }
            Ok(Tensor::from_vec(data, (pairs.len(), ch, size, size), device)?)
        };
        let instructions: Vec<String> = pairs.iter().map(|p| p.instruction.clone()).collect();
        Ok(Self {
            source: stack(&|p| &p.source, 3)?,
            target: stack(&|p| &p.target, 3)?,
            control: stack(&|p| &p.control, cc)?,
            text: embedder.embed_batch(&instructions, DType::F32, device)?,
            instructions,
        })
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn control_channels(&self) -> usize {
        self.control.dims()[1]
    }

    /// `(target, control, text)` rows at `idx`.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), self.target.device())?;
        Ok((
            self.target.index_select(&ids, 0)?,
            self.control.index_select(&ids, 0)?,
            self.text.index_select(&ids, 0)?,
        ))
    }
}

/// Training and held-out splits; held-out scenes are the last ones.
pub fn micro_dataset(cfg: &MicroDatasetConfig, embedder: &TextEmbedder, device: &Device) -> Result<(PairDataset, PairDataset)> {
    if cfg.held_out_scenes == 0 || cfg.held_out_scenes >= cfg.scenes {
        return Err(Error::config("held_out_scenes must be in [1, scenes)"));
    }
    let pairs = generate_pairs(cfg)?;
    let split = (cfg.scenes - cfg.held_out_scenes) * 2;
    Ok((
        PairDataset::from_pairs(&pairs[..split], cfg.size, embedder, device)?,
        PairDataset::from_pairs(&pairs[split..], cfg.size, embedder, device)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_swap_and_differ() {
        let cfg = MicroDatasetConfig {
            scenes: 4,
            ..MicroDatasetConfig::default()
        };
        let pairs = generate_pairs(&cfg).unwrap();
        assert_eq!(pairs.len(), 8);
        for s in pairs.chunks(2) {
            assert_eq!(s[0].source, s[1].target);
            assert_eq!(s[0].target, s[1].source);
            assert_ne!(s[0].source, s[0].target);
            assert!(s[0].instruction.starts_with("remove the "));
            assert!(s[1].instruction.starts_with("add a"));
        }
        assert_eq!(generate_pairs(&cfg).unwrap()[3].target, pairs[3].target);
    }

    #[test]
    fn canny_control_is_binary_single_channel() {
        let cfg = MicroDatasetConfig {
            scenes: 3,
            held_out_scenes: 1,
            conditioning: Conditioning::Canny,
            ..MicroDatasetConfig::default()
        };
        let (train, test) = micro_dataset(&cfg, &TextEmbedder::default(), &Device::Cpu).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        assert_eq!(train.control_channels(), 1);
        let v = train.control.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == -1.0 || x == 1.0));
        assert!(v.iter().any(|&x| x == 1.0));
    }
}
