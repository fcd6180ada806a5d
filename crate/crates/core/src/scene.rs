//! Procedural scenes of flat-coloured shapes on smooth textured
//! backgrounds: the source of the synthetic corpus and of the diffusion
//! micro-dataset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Named colours used for shapes; names double as caption attributes.
pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [235, 215, 40]),
    ("purple", [150, 50, 190]),
    ("orange", [245, 140, 30]),
];

/// Object classes of the synthetic corpus. Every class has one planted
/// colour, which the mock embedder uses as its notion of "looks like".
#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub label: &'static str,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    pub captions: &'static [&'static str],
}

pub const CATALOG: [CatalogEntry; 10] = [
    CatalogEntry { label: "apple", shape: ShapeKind::Circle, color: [210, 25, 25], captions: &["shiny red apple", "red apple"] },
    CatalogEntry { label: "car", shape: ShapeKind::Square, color: [25, 50, 210], captions: &["wooden vintage car", "small blue car"] },
    CatalogEntry { label: "cow", shape: ShapeKind::Square, color: [100, 55, 15], captions: &["dark brown cow", "brown cow"] },
    CatalogEntry { label: "bowl", shape: ShapeKind::Circle, color: [245, 245, 245], captions: &["white ceramic bowl", "empty white bowl"] },
    CatalogEntry { label: "person", shape: ShapeKind::Triangle, color: [250, 150, 0], captions: &["person in blue shirt", "person in orange coat"] },
    CatalogEntry { label: "plant", shape: ShapeKind::Triangle, color: [15, 150, 40], captions: &["potted plant", "green leafy plant"] },
    CatalogEntry { label: "cat", shape: ShapeKind::Circle, color: [20, 20, 20], captions: &["black cat", "sleeping black cat"] },
    CatalogEntry { label: "bird", shape: ShapeKind::Triangle, color: [0, 205, 205], captions: &["small cyan bird", "bird on a branch"] },
    CatalogEntry { label: "hand", shape: ShapeKind::Circle, color: [255, 205, 170], captions: &["open hand"] },
    CatalogEntry { label: "shirt", shape: ShapeKind::Square, color: [205, 0, 205], captions: &["magenta shirt"] },
];

pub fn catalog_entry(label: &str) -> Option<&'static CatalogEntry> {
    CATALOG.iter().find(|e| e.label == label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub rgb: [u8; 3],
    /// Centre and half-extent in pixels.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = self.radius;
        match self.kind {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            // Apex up; base on y = cy + r.
            ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }

    /// Pixels whose centres fall inside the shape.
    pub fn mask(&self, width: usize, height: usize) -> Mask {
        Mask::from_fn(width, height, |x, y| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

/// Two-colour linear gradient with low-amplitude value noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub from: [u8; 3],
    pub to: [u8; 3],
    /// Unit direction of the gradient.
    pub dir: (f64, f64),
    pub noise: Vec<f32>,
    pub noise_amp: f32,
}

impl Background {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, noise_amp: f32) -> Self {
        let muted = |rng: &mut R| -> [u8; 3] { [rng.random_range(60..200), rng.random_range(60..200), rng.random_range(60..200)] };
        let from = muted(rng);
        let to = muted(rng);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let noise = (0..width * height).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self {
            from,
            to,
            dir: (angle.cos(), angle.sin()),
            noise,
            noise_amp,
        }
    }

    pub fn pixel(&self, x: usize, y: usize, width: usize, height: usize) -> [f32; 3] {
        let u = (x as f64 + 0.5) / width as f64 - 0.5;
        let v = (y as f64 + 0.5) / height as f64 - 0.5;
        let s = ((u * self.dir.0 + v * self.dir.1) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0) as f32;
        let n = self.noise[y * width + x] * self.noise_amp;
        std::array::from_fn(|c| {
            let a = f32::from(self.from[c]) / 255.0;
            let b = f32::from(self.to[c]) / 255.0;
            (a + (b - a) * s + n).clamp(0.0, 1.0)
        })
    }
}

/// Renders `[H·W·3]` floats in `[0, 1]`; later shapes paint over earlier ones.
pub fn render(bg: &Background, shapes: &[Shape], width: usize, height: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let mut px = bg.pixel(x, y, width, height);
            for s in shapes {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    px = s.rgb.map(|c| f32::from(c) / 255.0);
                }
            }
            out.extend_from_slice(&px);
        }
    }
    out
}

pub fn to_rgb_image(pixels: &[f32], width: usize, height: usize) -> image::RgbImage {
    image::RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = (y as usize * width + x as usize) * 3;
        image::Rgb(std::array::from_fn(|c| (pixels[i + c] * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}
