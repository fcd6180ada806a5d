//! Binary masks, float planes and PNG I/O shared by the pipeline, the
//! synthetic corpus and the metrics.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel box `[x0, y0, x1, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!("degenerate box [{x0},{y0},{x1},{y1}]")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.x0) + f64::from(self.x1)) / 2.0,
            (f64::from(self.y0) + f64::from(self.y1)) / 2.0,
        )
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("mask", "pixel count", width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_bbox(width: usize, height: usize, b: &BBox) -> Self {
        Self::from_fn(width, height, |x, y| {
            x >= b.x0 as usize && x < b.x1 as usize && y >= b.y0 as usize && y < b.y1 as usize
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / (self.width * self.height) as f64
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.width != other.width {
            return Err(Error::shape("mask", "width", self.width, other.width));
        }
        if self.height != other.height {
            return Err(Error::shape("mask", "height", self.height, other.height));
        }
        Ok(())
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Ok(Mask { data, ..*self })
    }

    pub fn and_count(&self, other: &Mask) -> Result<usize> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count())
    }

    pub fn iou(&self, other: &Mask) -> Result<f64> {
        let inter = self.and_count(other)?;
        let union = self.or(other)?.count();
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    pub fn is_subset_of(&self, other: &Mask) -> Result<bool> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b))
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        })
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Reads a `{0, 255}` single-channel PNG; any other value is rejected.
    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let mut data = Vec::with_capacity((img.width() * img.height()) as usize);
        for p in img.pixels() {
            match p.0[0] {
                0 => data.push(false),
                255 => data.push(true),
                v => return Err(Error::invalid(format!("mask pixel value {v} is not 0 or 255"))),
            }
        }
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path).map_err(Into::into)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Stage {
            stage: "read mask".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::from_gray_image(&img.to_luma8())
    }
}

/// Single-channel float image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Rec. 601 luma in `[0, 1]`.
    pub fn luma(img: &RgbImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            let p = img.get_pixel(x as u32, y as u32).0;
            (0.299 * f32::from(p[0]) + 0.587 * f32::from(p[1]) + 0.114 * f32::from(p[2])) / 255.0
        })
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Stage {
        stage: "read image".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(Into::into)
}

/// Encodes to PNG bytes in memory.
pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<image::DynamicImage> {
    Ok(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let m = Mask::from_fn(7, 5, |x, y| (x + y) % 3 == 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let img = GrayImage::from_pixel(2, 2, Luma([7]));
        assert!(Mask::from_gray_image(&img).is_err());
    }

    #[test]
    fn bbox_and_iou() {
        let b = BBox::new(1, 2, 4, 5).unwrap();
        let m = Mask::from_bbox(8, 8, &b);
        assert_eq!(m.count(), 9);
        assert_eq!(m.bbox(), Some(b));
        assert_eq!(m.iou(&m).unwrap(), 1.0);
        assert!(Mask::new(8, 8).bbox().is_none());
        assert!(BBox::new(3, 0, 3, 1).is_err());
    }
}
