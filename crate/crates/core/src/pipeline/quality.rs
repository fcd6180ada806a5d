//! Classical check of an inpainted region: a filled area should be smooth
//! and nearly edge-free. This is a stand-in with configurable bounds.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::canny::canny_edges;
use super::filters::QualityBounds;
use crate::error::Result;
use crate::imaging::{Mask, Plane};

/// Canny thresholds used for the edge-density measure.
const EDGE_LOW: f64 = 0.1;
const EDGE_HIGH: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub variance: f64,
    pub edge_density: f64,
    pub pass: bool,
}

pub fn check_inpaint_quality(inpainted: &RgbImage, region: &Mask, bounds: &QualityBounds) -> Result<QualityReport> {
    let luma = Plane::luma(inpainted);
    let n = region.count();
    if n == 0 {
        return Ok(QualityReport {
            variance: 0.0,
            edge_density: 0.0,
            pass: true,
        });
    }
    let vals: Vec<f64> = region
        .data()
        .iter()
        .zip(&luma.data)
        .filter(|(m, _)| **m)
        .map(|(_, v)| f64::from(*v))
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let variance = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let edges = canny_edges(&luma, EDGE_LOW, EDGE_HIGH)?;
    // Edges on the region boundary are expected; count the interior only.
    let interior = Mask::from_fn(region.width(), region.height(), |x, y| {
        region.get(x, y)
            && x > 0
            && y > 0
            && x + 1 < region.width()
            && y + 1 < region.height()
            && region.get(x - 1, y)
            && region.get(x + 1, y)
            && region.get(x, y - 1)
            && region.get(x, y + 1)
    });
    let edge_density = if interior.count() == 0 {
        0.0
    } else {
        edges.and_count(&interior)? as f64 / interior.count() as f64
    };
    Ok(QualityReport {
        variance,
        edge_density,
        pass: variance <= bounds.max_variance && edge_density <= bounds.max_edge_density,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_fill_passes_and_checkerboard_fails() {
        let region = Mask::from_fn(20, 20, |x, y| (4..16).contains(&x) && (4..16).contains(&y));
        let flat = RgbImage::from_pixel(20, 20, image::Rgb([90, 90, 90]));
        let r = check_inpaint_quality(&flat, &region, &QualityBounds::default()).unwrap();
        assert!(r.pass && r.variance == 0.0 && r.edge_density == 0.0);
        let busy = RgbImage::from_fn(20, 20, |x, y| if (x / 2 + y / 2) % 2 == 0 { image::Rgb([0, 0, 0]) } else { image::Rgb([255, 255, 255]) });
        let r = check_inpaint_quality(&busy, &region, &QualityBounds::default()).unwrap();
        assert!(!r.pass);
    }
}
