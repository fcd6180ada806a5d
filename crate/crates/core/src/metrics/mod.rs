//! Edit-quality metrics: pixel L1/L2, embedding cosine similarities and
//! the Fréchet distance between embedding distributions.

pub mod fid;
pub mod report;

use image::RgbImage;

use crate::error::{Error, Result};

pub use fid::{frechet_distance, EmbeddingSet, GaussianAccumulator};
pub use report::{evaluate_manifest, MetricReport, Providers};

/// Mean absolute and mean squared difference of two images scaled to
/// `[0, 1]`.
pub fn pixel_distance(a: &RgbImage, b: &RgbImage) -> Result<(f64, f64)> {
    if a.width() != b.width() {
        return Err(Error::shape("pixel_distance", "width", a.width() as usize, b.width() as usize));
    }
    if a.height() != b.height() {
        return Err(Error::shape("pixel_distance", "height", a.height() as usize, b.height() as usize));
    }
    pixel_distance_raw(a.as_raw(), b.as_raw())
}

/// Same as [`pixel_distance`] over flat 8-bit buffers.
pub fn pixel_distance_raw(a: &[u8], b: &[u8]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::shape("pixel_distance", "value count", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("pixel_distance on empty images"));
    }
    let (mut l1, mut l2) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let d = (f64::from(*x) - f64::from(*y)) / 255.0;
        l1 += d.abs();
        l2 += d * d;
    }
    let n = a.len() as f64;
    Ok((l1 / n, l2 / n))
}

/// Cosine similarity; zero vectors are rejected.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", "dimension", a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

pub fn embedding_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    cosine(a, b)
}
