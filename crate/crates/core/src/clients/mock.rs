//! Deterministic in-process stand-ins for every client kind.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::sidecar::{DepthRamp, Truth};
use super::*;
use crate::pipeline::morphology::dilate_mask;
use crate::scene::CATALOG;

fn truth(kind: ClientKind, image: &ImageInput) -> Result<Truth> {
    let path = image
        .path
        .ok_or_else(|| kind.error("mock needs the image path to find its sidecar"))?;
    Truth::load_for(path).map_err(|e| kind.error(e.to_string()))
}

fn bbox_of(raw: [u32; 4]) -> Result<BBox> {
    BBox::new(raw[0], raw[1], raw[2], raw[3])
}

/// Labels planted in the sidecar.
pub struct MockTagger;

impl Tagger for MockTagger {
    fn tag(&self, image: &ImageInput) -> Result<Vec<String>> {
        Ok(normalize_labels(truth(ClientKind::Tagger, image)?.labels))
    }
}

/// Sidecar boxes of the requested labels.
pub struct MockDetector;

impl Detector for MockDetector {
    fn detect(&self, image: &ImageInput, labels: &[String]) -> Result<Vec<Detection>> {
        if labels.is_empty() {
            return Ok(Vec::new());
        }
        let t = truth(ClientKind::Detector, image)?;
        t.objects
            .iter()
            .filter(|o| labels.contains(&o.label))
            .map(|o| {
                Ok(Detection {
                    label: o.label.clone(),
                    bbox: bbox_of(o.bbox)?,
                    score: o.score,
                    clamped: false,
                })
            })
            .collect()
    }
}

/// Fills the box.
pub struct MockSegmenter;

impl Segmenter for MockSegmenter {
    fn segment(&self, image: &ImageInput, bbox: &BBox) -> Result<Mask> {
        if !bbox.within(image.width(), image.height()) {
            return Err(ClientKind::Segmenter.error("box outside the image"));
        }
        Ok(Mask::from_bbox(image.width() as usize, image.height() as usize, bbox))
    }
}

/// Caption of the sidecar object whose box overlaps most.
pub struct MockCaptioner;

impl Captioner for MockCaptioner {
    fn caption(&self, image: &ImageInput, bbox: &BBox) -> Result<String> {
        let t = truth(ClientKind::Captioner, image)?;
        let (w, h) = (image.width() as usize, image.height() as usize);
        let query = Mask::from_bbox(w, h, bbox);
        let mut best: Option<(f64, &str)> = None;
        for o in &t.objects {
            let iou = Mask::from_bbox(w, h, &bbox_of(o.bbox)?).iou(&query)?;
            if iou > 0.0 && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, &o.caption));
            }
        }
        best.map(|(_, c)| c.to_string())
            .ok_or_else(|| ClientKind::Captioner.error("no planted object under the box"))
    }
}

/// Fills the mask with the mean colour of the 3-pixel ring around it.
pub struct MockInpainter;

pub const RING_WIDTH: usize = 3;

/// Mean colour of pixels within Chebyshev distance `RING_WIDTH` of the
/// mask but outside it; `None` when the ring is empty.
pub fn border_mean(image: &RgbImage, mask: &Mask) -> Result<Option<[u8; 3]>> {
    let ring = dilate_mask(mask, 2 * RING_WIDTH + 1)?;
    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for (x, y, p) in image.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        if ring.get(x, y) && !mask.get(x, y) {
            for c in 0..3 {
                sum[c] += u64::from(p.0[c]);
            }
            n += 1;
        }
    }
    // Round half up in integer arithmetic.
    Ok((n > 0).then(|| sum.map(|s| ((2 * s + n) / (2 * n)) as u8)))
}

impl Inpainter for MockInpainter {
    fn inpaint(&self, image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        if (mask.width(), mask.height()) != (image.width() as usize, image.height() as usize) {
            return Err(ClientKind::Inpainter.error("mask and image sizes differ"));
        }
        let mut out = image.clone();
        if mask.is_empty() {
            return Ok(out);
        }
        let fill = border_mean(image, mask)?.ok_or_else(|| ClientKind::Inpainter.error("mask covers the whole image"))?;
        for (x, y, p) in out.enumerate_pixels_mut() {
            if mask.get(x as usize, y as usize) {
                p.0 = fill;
            }
        }
        Ok(out)
    }
}

/// Planar ramp from the sidecar (or a default one). Each planted object's
/// box is painted as a bulge: nearest at its centre, at the object's depth,
/// and receding by its metric half-width at the box corners.
#[derive(Default)]
pub struct MockDepth {
    pub fallback: DepthRamp,
}

impl DepthEstimator for MockDepth {
    fn estimate_depth(&self, image: &ImageInput) -> Result<DepthMap> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let t = image.path.and_then(|p| Truth::load_for(p).ok());
        let ramp = t.as_ref().map_or(self.fallback, |t| t.depth);
        let mut data: Vec<f32> = (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).map(|(u, v)| ramp.at(u, v, w, h) as f32).collect();
        if let Some(t) = &t {
            for o in &t.objects {
                let b = bbox_of(o.bbox)?;
                let (cx, cy) = b.center();
                let (hw, hh) = (f64::from(b.width()) / 2.0, f64::from(b.height()) / 2.0);
                let thickness = hw.max(hh) * o.depth / w.max(h) as f64;
                for v in b.y0 as usize..(b.y1 as usize).min(h) {
                    for u in b.x0 as usize..(b.x1 as usize).min(w) {
                        let rx = (u as f64 + 0.5 - cx) / hw;
                        let ry = (v as f64 + 0.5 - cy) / hh;
                        data[v * w + u] = (o.depth + thickness * (rx * rx + ry * ry) / 2.0) as f32;
                    }
                }
            }
        }
        sanitize_depth(w, h, (w as u32, h as u32), data)
    }
}

pub const EMBED_DIM: usize = 64;
const THUMB: usize = 4;
const COLOR_TOLERANCE: f64 = 40.0;
const RESIDUAL_WEIGHT: f64 = 0.5;

/// Hash-projection embedder with planted semantics: a text embeds to the
/// normalized sum of per-token vectors; an image embeds to the label
/// vectors of catalogue colours it contains, weighted by pixel share, plus
/// a random projection of a coarse colour thumbnail.
pub struct MockEmbedder {
    seed: u64,
    id: String,
    palette: Vec<(String, [u8; 3])>,
    projection: Vec<f64>,
    accepts_text: bool,
}

impl MockEmbedder {
    pub fn new(id: &str, seed: u64, palette: Vec<(String, [u8; 3])>, accepts_text: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n = THUMB * THUMB * 3;
        let scale = 1.0 / (n as f64).sqrt();
        let projection = (0..EMBED_DIM * n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            seed,
            id: id.to_string(),
            palette,
            projection,
            accepts_text,
        }
    }

    fn catalogue() -> Vec<(String, [u8; 3])> {
        CATALOG.iter().map(|e| (e.label.to_string(), e.color)).collect()
    }

    /// Image and text embedder.
    pub fn clip(seed: u64) -> Self {
        Self::new("mock-clip", seed, Self::catalogue(), true)
    }

    /// Image-only embedder with an independent projection.
    pub fn dino(seed: u64) -> Self {
        Self::new("mock-dino", seed.wrapping_add(0xd1_0000), Self::catalogue(), false)
    }

    /// Unit vector for a token, a pure function of (seed, token).
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(format!("{}:{token}", self.seed).as_bytes());
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let v: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = crate::diffusion::text::tokenize(text);
        if tokens.is_empty() {
            return Err(ClientKind::Embedder.error("empty text"));
        }
        let mut acc = vec![0.0; EMBED_DIM];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        normalize_vector(ClientKind::Embedder, acc.into_iter().map(|v| v as f32).collect())
    }

    fn embed_image(&self, img: &RgbImage) -> Result<Vec<f32>> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(ClientKind::Embedder.error("empty image"));
        }
        let mut acc = vec![0.0; EMBED_DIM];
        let total = (w * h) as f64;
        for (label, color) in &self.palette {
            let hits = img
                .pixels()
                .filter(|p| {
                    let d: f64 = (0..3).map(|c| (f64::from(p.0[c]) - f64::from(color[c])).powi(2)).sum();
                    d.sqrt() <= COLOR_TOLERANCE
                })
                .count();
            if hits > 0 {
                let share = hits as f64 / total;
                for (a, v) in acc.iter_mut().zip(self.token_vector(label)) {
                    *a += share * v;
                }
            }
        }
        let mut thumb = vec![0.0; THUMB * THUMB * 3];
        let mut counts = vec![0.0; THUMB * THUMB];
        for (x, y, p) in img.enumerate_pixels() {
            let cell = (y as usize * THUMB / h) * THUMB + x as usize * THUMB / w;
            counts[cell] += 1.0;
            for c in 0..3 {
                thumb[cell * 3 + c] += f64::from(p.0[c]) / 255.0;
            }
        }
        for (i, t) in thumb.iter_mut().enumerate() {
            let n = counts[i / 3];
            *t = if n > 0.0 { *t / n - 0.5 } else { 0.0 };
        }
        let n = thumb.len();
        for (d, a) in acc.iter_mut().enumerate() {
            let r: f64 = (0..n).map(|j| self.projection[d * n + j] * thumb[j]).sum();
            *a += RESIDUAL_WEIGHT * r;
        }
        // An all-zero thumbnail and no palette hit leaves nothing to embed.
        if acc.iter().all(|v| *v == 0.0) {
            acc = self.token_vector("<blank>");
        }
        normalize_vector(ClientKind::Embedder, acc.into_iter().map(|v| v as f32).collect())
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, item: EmbedItem) -> Result<Vec<f32>> {
        match item {
            EmbedItem::Text(t) if self.accepts_text => self.embed_text(t),
            EmbedItem::Text(_) => Err(ClientKind::Embedder.error(format!("{} does not embed text", self.id))),
            EmbedItem::Image(img) => self.embed_image(img),
        }
    }

    fn provider_id(&self) -> String {
        format!("{}@{}", self.id, self.seed)
    }
}

/// Head-noun rule in place of an LLM.
pub struct MockLlm;

impl LabelExtractor for MockLlm {
    fn extract_label(&self, caption: &str) -> Result<String> {
        head_noun(caption).map_err(|e| ClientKind::Llm.error(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cosine;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        cosine(a, b).unwrap()
    }

    #[test]
    fn inpaint_fills_with_border_mean() {
        let mut img = RgbImage::from_pixel(12, 12, image::Rgb([100, 100, 100]));
        for x in 0..12 {
            img.put_pixel(x, 0, image::Rgb([10, 40, 200]));
        }
        let mut mask = Mask::new(12, 12);
        for y in 4..6 {
            for x in 4..7 {
                mask.set(x, y, true);
            }
        }
        let out = MockInpainter.inpaint(&img, &mask).unwrap();
        // Ring: 9x8 box around the mask minus the 6 mask pixels = 66,
        // none on row 0 (the ring spans rows 1..9).
        let fill = out.get_pixel(5, 5).0;
        assert_eq!(fill, [100, 100, 100]);
        for (x, y, p) in out.enumerate_pixels() {
            if !mask.get(x as usize, y as usize) {
                assert_eq!(p, img.get_pixel(x, y));
            }
        }
        assert_eq!(MockInpainter.inpaint(&img, &Mask::new(12, 12)).unwrap(), img);
    }

    #[test]
    fn border_mean_oracle() {
        let img = RgbImage::from_fn(10, 10, |x, y| image::Rgb([(x * 20) as u8, (y * 20) as u8, 7]));
        let mut mask = Mask::new(10, 10);
        mask.set(0, 0, true);
        // Ring: x, y in 0..=3 except (0, 0).
        let mut s = [0u64; 3];
        let mut n = 0;
        for y in 0..=3u32 {
            for x in 0..=3u32 {
                if (x, y) != (0, 0) {
                    let p = img.get_pixel(x, y).0;
                    (0..3).for_each(|c| s[c] += u64::from(p[c]));
                    n += 1;
                }
            }
        }
        let expect = s.map(|v| (v as f64 / n as f64).round() as u8);
        assert_eq!(border_mean(&img, &mask).unwrap().unwrap(), expect);
    }

    #[test]
    fn embedder_is_unit_and_deterministic() {
        let e = MockEmbedder::clip(1);
        let v = e.embed(EmbedItem::Text("a cat")).unwrap();
        let n: f64 = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(v, MockEmbedder::clip(1).embed(EmbedItem::Text("a cat")).unwrap());
        assert_ne!(v, MockEmbedder::clip(2).embed(EmbedItem::Text("a cat")).unwrap());
    }

    #[test]
    fn planted_similarity() {
        let e = MockEmbedder::clip(0);
        let cat = CATALOG.iter().find(|c| c.label == "cat").unwrap();
        let mut crop = RgbImage::from_pixel(10, 10, image::Rgb([128, 128, 140]));
        for y in 2..8 {
            for x in 2..8 {
                crop.put_pixel(x, y, image::Rgb(cat.color));
            }
        }
        let v = e.embed(EmbedItem::Image(&crop)).unwrap();
        let s_cat = dot(&v, &e.embed(EmbedItem::Text("cat")).unwrap());
        let s_dog = dot(&v, &e.embed(EmbedItem::Text("dog")).unwrap());
        assert!(s_cat > s_dog, "{s_cat} vs {s_dog}");
        assert!(s_cat > 0.25, "{s_cat}");
    }

    #[test]
    fn dino_rejects_text() {
        assert!(MockEmbedder::dino(0).embed(EmbedItem::Text("cat")).is_err());
    }

    #[test]
    fn llm_mock_head_noun() {
        assert_eq!(MockLlm.extract_label("person in blue shirt").unwrap(), "person");
        assert!(MockLlm.extract_label("").is_err());
    }
}
