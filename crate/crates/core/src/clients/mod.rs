//! Uniform client layer for the external model services: tagger, grounded
//! detector, segmenter, dense captioner, inpainter, depth estimator,
//! embedding provider and label-extraction LLM.
//!
//! Every kind has an HTTP implementation ([`http`]) and a deterministic
//! in-process mock ([`mock`]) that reads planted truth from a sidecar.

pub mod config;
pub mod http;
pub mod limiter;
pub mod mock;
pub mod sidecar;

use std::collections::BTreeSet;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, Mask, Plane};

pub use config::{ClientConfig, ClientSpec, ClientsConfig, ProvidersConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Tagger,
    Detector,
    Segmenter,
    Captioner,
    Inpainter,
    Depth,
    Embedder,
    Llm,
}

impl ClientKind {
    pub const ALL: [ClientKind; 8] = [
        ClientKind::Tagger,
        ClientKind::Detector,
        ClientKind::Segmenter,
        ClientKind::Captioner,
        ClientKind::Inpainter,
        ClientKind::Depth,
        ClientKind::Embedder,
        ClientKind::Llm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ClientKind::Tagger => "tagger",
            ClientKind::Detector => "detector",
            ClientKind::Segmenter => "segmenter",
            ClientKind::Captioner => "captioner",
            ClientKind::Inpainter => "inpainter",
            ClientKind::Depth => "depth",
            ClientKind::Embedder => "embedder",
            ClientKind::Llm => "llm",
        }
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        Error::Client {
            kind: self.name(),
            message: message.into(),
        }
    }
}

/// An image plus the file it came from; mocks locate sidecars through the
/// path.
#[derive(Clone, Copy)]
pub struct ImageInput<'a> {
    pub image: &'a RgbImage,
    pub path: Option<&'a Path>,
}

impl<'a> ImageInput<'a> {
    pub fn new(image: &'a RgbImage, path: Option<&'a Path>) -> Self {
        Self { image, path }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub bbox: BBox,
    pub score: f64,
    /// The service returned a box outside the image that was clamped.
    #[serde(default)]
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Plane,
    /// Non-positive or non-finite values replaced by [`MIN_DEPTH`].
    pub clamped_pixels: usize,
}

pub const MIN_DEPTH: f32 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub enum EmbedItem<'a> {
    Image(&'a RgbImage),
    Text(&'a str),
}

pub trait Tagger: Send + Sync {
    fn tag(&self, image: &ImageInput) -> Result<Vec<String>>;
}

pub trait Detector: Send + Sync {
    fn detect(&self, image: &ImageInput, labels: &[String]) -> Result<Vec<Detection>>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &ImageInput, bbox: &BBox) -> Result<Mask>;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &ImageInput, bbox: &BBox) -> Result<String>;
}

pub trait Inpainter: Send + Sync {
    fn inpaint(&self, image: &RgbImage, mask: &Mask) -> Result<RgbImage>;
}

pub trait DepthEstimator: Send + Sync {
    fn estimate_depth(&self, image: &ImageInput) -> Result<DepthMap>;
}

pub trait Embedder: Send + Sync {
    /// Unit-norm embedding.
    fn embed(&self, item: EmbedItem) -> Result<Vec<f32>>;
    fn provider_id(&self) -> String;
}

pub trait LabelExtractor: Send + Sync {
    fn extract_label(&self, caption: &str) -> Result<String>;
}

/// One implementation per kind.
pub struct Clients {
    pub tagger: Box<dyn Tagger>,
    pub detector: Box<dyn Detector>,
    pub segmenter: Box<dyn Segmenter>,
    pub captioner: Box<dyn Captioner>,
    pub inpainter: Box<dyn Inpainter>,
    pub depth: Box<dyn DepthEstimator>,
    pub embedder: Box<dyn Embedder>,
    pub llm: Box<dyn LabelExtractor>,
}

impl Clients {
    pub fn all_mock(seed: u64) -> Self {
        Self {
            tagger: Box::new(mock::MockTagger),
            detector: Box::new(mock::MockDetector),
            segmenter: Box::new(mock::MockSegmenter),
            captioner: Box::new(mock::MockCaptioner),
            inpainter: Box::new(mock::MockInpainter),
            depth: Box::new(mock::MockDepth::default()),
            embedder: Box::new(mock::MockEmbedder::clip(seed)),
            llm: Box::new(mock::MockLlm),
        }
    }

    pub fn from_config(cfg: &ClientsConfig, seed: u64) -> Result<Self> {
        use ClientSpec::Http;
        let mut c = Self::all_mock(seed);
        let http = |spec: &ClientConfig, kind| http::HttpClient::new(kind, spec.clone());
        if let Http(s) = cfg.spec(ClientKind::Tagger) {
            c.tagger = Box::new(http(s, ClientKind::Tagger)?);
        }
        if let Http(s) = cfg.spec(ClientKind::Detector) {
            c.detector = Box::new(http(s, ClientKind::Detector)?);
        }
        if let Http(s) = cfg.spec(ClientKind::Segmenter) {
            c.segmenter = Box::new(http(s, ClientKind::Segmenter)?);
        }
        if let Http(s) = cfg.spec(ClientKind::Captioner) {
            c.captioner = Box::new(http(s, ClientKind::Captioner)?);
        }
        if let Http(s) = cfg.spec(ClientKind::Inpainter) {
            c.inpainter = Box::new(http(s, ClientKind::Inpainter)?);
        }
        if let Http(s) = cfg.spec(ClientKind::Depth) {
            c.depth = Box::new(http(s, ClientKind::Depth)?);
        }
        if let Http(s) = cfg.spec(ClientKind::Embedder) {
            c.embedder = Box::new(http(s, ClientKind::Embedder)?);
        }
        if let Http(s) = cfg.spec(ClientKind::Llm) {
            c.llm = Box::new(http(s, ClientKind::Llm)?);
        }
        Ok(c)
    }
}

// Response post-processing shared by every transport.

/// Lowercase, trim, drop empties and duplicates, keep first-seen order.
pub fn normalize_labels(labels: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labels
        .into_iter()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && seen.insert(l.clone()))
        .collect()
}

/// Clamps a raw `[x0, y0, x1, y1]` box into the image; `None` if nothing
/// of it survives. The flag reports whether clamping changed it.
pub fn clamp_box(raw: [f64; 4], width: u32, height: u32) -> Option<(BBox, bool)> {
    if raw.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let cx = |v: f64| v.round().clamp(0.0, f64::from(width)) as u32;
    let cy = |v: f64| v.round().clamp(0.0, f64::from(height)) as u32;
    let (x0, y0, x1, y1) = (cx(raw[0]), cy(raw[1]), cx(raw[2]), cy(raw[3]));
    let clamped = raw[0] < 0.0 || raw[1] < 0.0 || raw[2] > f64::from(width) || raw[3] > f64::from(height);
    BBox::new(x0, y0, x1, y1).ok().map(|b| (b, clamped))
}

/// The segmenter contract: same size as the image and overlapping the box.
pub fn check_segment(mask: &Mask, width: u32, height: u32, bbox: &BBox) -> Result<()> {
    if mask.width() != width as usize || mask.height() != height as usize {
        return Err(ClientKind::Segmenter.error(format!(
            "mask is {}x{}, image is {width}x{height}",
            mask.width(),
            mask.height()
        )));
    }
    let iou = mask.iou(&Mask::from_bbox(mask.width(), mask.height(), bbox))?;
    if iou <= 0.0 {
        return Err(ClientKind::Segmenter.error("mask does not overlap its box"));
    }
    Ok(())
}

/// Keeps the service's pixels inside the mask and the original outside.
/// Returns the composite and how many outside pixels the service altered.
pub fn composite_inpaint(original: &RgbImage, filled: &RgbImage, mask: &Mask) -> Result<(RgbImage, usize)> {
    if filled.dimensions() != original.dimensions() {
        return Err(ClientKind::Inpainter.error(format!(
            "inpainted image is {:?}, input is {:?}",
            filled.dimensions(),
            original.dimensions()
        )));
    }
    let mut out = original.clone();
    let mut altered = 0;
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask.get(x as usize, y as usize) {
            *p = *filled.get_pixel(x, y);
        } else if filled.get_pixel(x, y) != p {
            altered += 1;
        }
    }
    Ok((out, altered))
}

pub fn sanitize_depth(width: usize, height: usize, expected: (u32, u32), values: Vec<f32>) -> Result<DepthMap> {
    if (width, height) != (expected.0 as usize, expected.1 as usize) || values.len() != width * height {
        return Err(ClientKind::Depth.error(format!(
            "depth map {width}x{height} ({} values) does not match image {}x{}",
            values.len(),
            expected.0,
            expected.1
        )));
    }
    let mut clamped = 0;
    let data = values
        .into_iter()
        .map(|v| {
            if v.is_finite() && v > 0.0 {
                v
            } else {
                clamped += 1;
                MIN_DEPTH
            }
        })
        .collect();
    Ok(DepthMap {
        depth: Plane { width, height, data },
        clamped_pixels: clamped,
    })
}

pub fn normalize_vector(kind: ClientKind, v: Vec<f32>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if v.is_empty() || !norm.is_finite() || norm == 0.0 {
        return Err(kind.error("embedding is empty, zero or non-finite"));
    }
    Ok(v.into_iter().map(|x| (f64::from(x) / norm) as f32).collect())
}

pub const PROMPT_VERSION: &str = "label-extract/v1";

/// The in-context examples shown to the label-extraction LLM.
pub const LABEL_EXAMPLES: [(&str, &str); 3] = [
    ("man in a red jacket", "man"),
    ("small wooden table", "table"),
    ("white dog with black spots", "dog"),
];

pub fn label_prompt(caption: &str) -> String {
    let mut p = String::from(
        "Extract the object class label from the caption. Answer with the label only, in lowercase.\n\n",
    );
    for (c, l) in LABEL_EXAMPLES {
        p.push_str(&format!("Caption: {c}\nLabel: {l}\n\n"));
    }
    p.push_str(&format!("Caption: {caption}\nLabel:"));
    p
}

const PHRASE_BREAKS: &[&str] = &[
    "in", "on", "with", "of", "at", "near", "by", "from", "under", "behind", "wearing", "holding", "that", "which",
    "next", "beside",
];

/// Last word before the first prepositional or relative break.
pub fn head_noun(caption: &str) -> Result<String> {
    let tokens: Vec<String> = caption
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    let end = tokens
        .iter()
        .skip(1)
        .position(|t| PHRASE_BREAKS.contains(&t.as_str()))
        .map_or(tokens.len(), |p| p + 1);
    tokens[..end]
        .last()
        .cloned()
        .ok_or_else(|| Error::invalid("cannot extract a label from an empty caption"))
}
