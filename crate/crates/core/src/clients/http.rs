//! JSON-over-HTTP transport. One POST per call, `schema: 1` on both
//! sides, images as base64 PNG.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use super::limiter::Limiter;
use super::*;
use crate::imaging::{decode_png, png_bytes};

pub const SCHEMA: u32 = 1;

pub struct HttpClient {
    kind: ClientKind,
    cfg: ClientConfig,
    client: reqwest::blocking::Client,
    limiter: Limiter,
    token: Option<String>,
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

impl HttpClient {
    pub fn new(kind: ClientKind, cfg: ClientConfig) -> Result<Self> {
        cfg.validate()?;
        let token = match &cfg.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::config(format!("{}: auth token variable {var} is not set", kind.name()))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| kind.error(format!("building HTTP client: {e}")))?;
        Ok(Self {
            kind,
            limiter: Limiter::new(cfg.max_in_flight, cfg.rate_per_sec),
            cfg,
            client,
            token,
        })
    }

    pub fn kind(&self) -> ClientKind {
        self.kind
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Value, Failure> {
        let _permit = self.limiter.acquire();
        let mut req = self.client.post(&self.cfg.endpoint).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Failure::Retryable(format!("timed out after {} ms", self.cfg.timeout_ms))
            } else {
                Failure::Retryable(format!("transport: {e}"))
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(format!("HTTP {status}")));
        }
        let value: Value = resp
            .json()
            .map_err(|e| Failure::Retryable(format!("reading response body: {e}")))?;
        match value.get("schema").and_then(Value::as_u64) {
            Some(s) if s == u64::from(SCHEMA) => Ok(value),
            other => Err(Failure::Fatal(format!("unsupported response schema {other:?}"))),
        }
    }

    /// POSTs `body` with retries; returns the parsed response.
    pub fn call(&self, mut body: Value) -> Result<Value> {
        body["schema"] = json!(SCHEMA);
        let attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        for n in 0..attempts {
            if n > 0 {
                std::thread::sleep(self.cfg.backoff(n));
            }
            match self.attempt(&body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(m)) => return Err(self.kind.error(m)),
                Err(Failure::Retryable(m)) => {
                    log::debug!("{} attempt {} failed: {m}", self.kind.name(), n + 1);
                    last = m;
                }
            }
        }
        Err(self.kind.error(format!("failed after {attempts} attempts: {last}")))
    }

    fn call_as<T: DeserializeOwned>(&self, body: Value) -> Result<T> {
        let v = self.call(body)?;
        serde_json::from_value(v).map_err(|e| self.kind.error(format!("malformed response: {e}")))
    }
}

pub fn encode_image(img: &RgbImage) -> Result<String> {
    Ok(B64.encode(png_bytes(img)?))
}

pub fn decode_image(kind: ClientKind, data: &str) -> Result<image::DynamicImage> {
    let bytes = B64.decode(data).map_err(|e| kind.error(format!("bad base64: {e}")))?;
    decode_png(&bytes).map_err(|e| kind.error(format!("bad PNG: {e}")))
}

pub fn encode_mask(mask: &Mask) -> Result<String> {
    let mut out = std::io::Cursor::new(Vec::new());
    mask.to_gray_image().write_to(&mut out, image::ImageFormat::Png)?;
    Ok(B64.encode(out.into_inner()))
}

#[derive(Deserialize)]
struct TagResp {
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct RawDetection {
    label: String,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Deserialize)]
struct DetectResp {
    detections: Vec<RawDetection>,
}

#[derive(Deserialize)]
struct MaskResp {
    mask: String,
}

#[derive(Deserialize)]
struct CaptionResp {
    caption: String,
}

#[derive(Deserialize)]
struct ImageResp {
    image: String,
}

#[derive(Deserialize)]
struct DepthResp {
    width: usize,
    height: usize,
    depth: Vec<f32>,
}

#[derive(Deserialize)]
struct VectorResp {
    vector: Vec<f32>,
}

#[derive(Deserialize)]
struct TextResp {
    text: String,
}

impl Tagger for HttpClient {
    fn tag(&self, image: &ImageInput) -> Result<Vec<String>> {
        let r: TagResp = self.call_as(json!({ "image": encode_image(image.image)? }))?;
        Ok(normalize_labels(r.labels))
    }
}

impl Detector for HttpClient {
    fn detect(&self, image: &ImageInput, labels: &[String]) -> Result<Vec<Detection>> {
        if labels.is_empty() {
            return Ok(Vec::new());
        }
        let r: DetectResp = self.call_as(json!({ "image": encode_image(image.image)?, "labels": labels }))?;
        let mut out = Vec::with_capacity(r.detections.len());
        for d in r.detections {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(self.kind.error(format!("score {} outside [0, 1]", d.score)));
            }
            match clamp_box(d.bbox, image.width(), image.height()) {
                Some((bbox, clamped)) => {
                    if clamped {
                        log::warn!("detector box {:?} for {} clamped to the image", d.bbox, d.label);
                    }
                    out.push(Detection {
                        label: d.label.trim().to_lowercase(),
                        bbox,
                        score: d.score,
                        clamped,
                    });
                }
                None => log::warn!("detector box {:?} for {} lies outside the image", d.bbox, d.label),
            }
        }
        Ok(out)
    }
}

impl Segmenter for HttpClient {
    fn segment(&self, image: &ImageInput, bbox: &BBox) -> Result<Mask> {
        let r: MaskResp = self.call_as(json!({ "image": encode_image(image.image)?, "bbox": bbox.to_array() }))?;
        let img = decode_image(self.kind, &r.mask)?.to_luma8();
        let mask = Mask::from_gray_image(&img).map_err(|e| self.kind.error(e.to_string()))?;
        check_segment(&mask, image.width(), image.height(), bbox)?;
        Ok(mask)
    }
}

impl Captioner for HttpClient {
    fn caption(&self, image: &ImageInput, bbox: &BBox) -> Result<String> {
        let r: CaptionResp = self.call_as(json!({ "image": encode_image(image.image)?, "bbox": bbox.to_array() }))?;
        let c = r.caption.trim().to_lowercase();
        if c.is_empty() {
            return Err(self.kind.error("empty caption"));
        }
        Ok(c)
    }
}

impl Inpainter for HttpClient {
    fn inpaint(&self, image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        if mask.is_empty() {
            return Ok(image.clone());
        }
        let r: ImageResp = self.call_as(json!({ "image": encode_image(image)?, "mask": encode_mask(mask)? }))?;
        let filled = decode_image(self.kind, &r.image)?.to_rgb8();
        let (out, altered) = composite_inpaint(image, &filled, mask)?;
        if altered > 0 {
            log::warn!("inpainter changed {altered} pixels outside the mask; restored");
        }
        Ok(out)
    }
}

impl DepthEstimator for HttpClient {
    fn estimate_depth(&self, image: &ImageInput) -> Result<DepthMap> {
        let r: DepthResp = self.call_as(json!({ "image": encode_image(image.image)? }))?;
        let d = sanitize_depth(r.width, r.height, (image.width(), image.height()), r.depth)?;
        if d.clamped_pixels > 0 {
            log::warn!("depth service returned {} non-positive values; clamped", d.clamped_pixels);
        }
        Ok(d)
    }
}

impl Embedder for HttpClient {
    fn embed(&self, item: EmbedItem) -> Result<Vec<f32>> {
        let body = match item {
            EmbedItem::Image(img) => json!({ "image": encode_image(img)? }),
            EmbedItem::Text(t) => json!({ "text": t }),
        };
        let r: VectorResp = self.call_as(body)?;
        normalize_vector(self.kind, r.vector)
    }

    fn provider_id(&self) -> String {
        self.cfg.endpoint.clone()
    }
}

impl LabelExtractor for HttpClient {
    fn extract_label(&self, caption: &str) -> Result<String> {
        if caption.trim().is_empty() {
            return Err(self.kind.error("empty caption"));
        }
        let r: TextResp = self.call_as(json!({
            "prompt": label_prompt(caption),
            "prompt_version": PROMPT_VERSION,
        }))?;
        let label = r.text.lines().next().unwrap_or("").trim().trim_end_matches('.').to_lowercase();
        if label.is_empty() {
            return Err(self.kind.error("empty label"));
        }
        Ok(label)
    }
}
