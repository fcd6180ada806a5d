//! `pipeline run`: images in, manifest of add/remove pairs out.
//!
//! Output layout under the run directory:
//!
//! ```text
//! images/<stem>.png        source images, re-encoded
//! objects/<stem>_oN.png    kept instance masks
//! masks/<base>.png         dilated edit masks
//! inpainted/<base>.png     inpainted targets
//! scenes/<stem>.json       per-image objects, groups and rejections
//! manifest.jsonl           one record per sample
//! quarantine.jsonl         client failures
//! summary.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::filters::{filter_by_keywords, filter_by_size, semantic_filter, Blocklist, FilterPolicy};
use super::morphology::dilate_mask;
use super::quality::check_inpaint_quality;
use super::types::*;
use crate::clients::{Clients, ImageInput, Inpainter};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{load_rgb, BBox, Mask};
use crate::instructions::{multi_instance_instruction, multi_instance_plan, simple_instruction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuarantineRecord {
    pub image: String,
    pub object: Option<String>,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub images: usize,
    pub detections: usize,
    pub kept_objects: usize,
    pub groups: usize,
    pub samples: usize,
    /// Rejection counts by reason.
    pub rejected: BTreeMap<String, usize>,
    pub quarantined: usize,
    pub seed: u64,
}

/// One edit: the objects it removes and its instructions per task.
#[derive(Debug, Clone)]
pub struct EditUnit {
    pub base: String,
    pub objects: Vec<ObjectRecord>,
    pub remove_instructions: Vec<Instruction>,
    pub add_instructions: Vec<Instruction>,
}

#[derive(Debug, Clone)]
pub struct BuiltPair {
    pub remove: EditSample,
    pub add: EditSample,
    pub inpainted: RgbImage,
    pub dilated: Mask,
}

pub fn source_rel(stem: &str) -> String {
    format!("images/{stem}.png")
}

/// The remove/add pair for a unit whose target has already been inpainted.
pub fn make_pair(stem: &str, unit: &EditUnit, dilated: Mask, inpainted: RgbImage) -> Result<BuiltPair> {
    let combined_mask = unit
        .objects
        .split_first()
        .ok_or_else(|| Error::invalid("an edit unit needs at least one object"))
        .and_then(|(first, rest)| rest.iter().try_fold(first.mask.clone(), |m, o| m.or(&o.mask)))?;
    if unit.remove_instructions.is_empty() || unit.add_instructions.is_empty() {
        return Err(Error::invalid("edit samples need at least one instruction"));
    }
    let original = source_rel(stem);
    let edited = format!("inpainted/{}.png", unit.base);
    let mask_path = format!("masks/{}.png", unit.base);
    let sample = |task: Task, source: &str, target: &str, instructions: &[Instruction]| EditSample {
        sample_id: format!("{}_{}", unit.base, task.name()),
        task,
        source_path: source.to_string(),
        target_path: target.to_string(),
        mask_path: mask_path.clone(),
        instructions: instructions.to_vec(),
        objects: unit.objects.clone(),
        combined_mask: combined_mask.clone(),
    };
    Ok(BuiltPair {
        remove: sample(Task::Remove, &original, &edited, &unit.remove_instructions),
        add: sample(Task::Add, &edited, &original, &unit.add_instructions),
        inpainted,
        dilated,
    })
}

/// Dilates the union mask, inpaints it and assembles both samples.
pub fn build_pair(stem: &str, image: &RgbImage, unit: &EditUnit, inpainter: &dyn Inpainter, kernel: usize) -> Result<BuiltPair> {
    let union = unit
        .objects
        .split_first()
        .ok_or_else(|| Error::invalid("an edit unit needs at least one object"))
        .and_then(|(first, rest)| rest.iter().try_fold(first.mask.clone(), |m, o| m.or(&o.mask)))?;
    let dilated = dilate_mask(&union, kernel)?;
    let inpainted = inpainter.inpaint(image, &dilated)?;
    make_pair(stem, unit, dilated, inpainted)
}

/// Images directly inside `dir` with a png or jpeg extension, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Per-image RNG seed: the first 8 bytes of `sha256(seed_le || stem)`.
pub fn image_seed(seed: u64, stem: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stem.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn crop(img: &RgbImage, b: &BBox) -> RgbImage {
    image::imageops::crop_imm(img, b.x0, b.y0, b.width(), b.height()).to_image()
}

struct Ctx<'a> {
    out: &'a Path,
    policy: &'a FilterPolicy,
    blocklist: &'a Blocklist,
    clients: &'a Clients,
    seed: u64,
}

#[derive(Default)]
struct ImageOutcome {
    records: Vec<ManifestRecord>,
    quarantine: Vec<QuarantineRecord>,
    detections: usize,
    kept: usize,
    groups: usize,
    rejected: Vec<String>,
}

struct Files {
    writes: Vec<(PathBuf, Vec<u8>)>,
}

impl Files {
    fn png(&mut self, rel: &str, img: &RgbImage) -> Result<()> {
        self.writes.push((PathBuf::from(rel), crate::imaging::png_bytes(img)?));
        Ok(())
    }

    fn mask(&mut self, rel: &str, m: &Mask) -> Result<()> {
        let mut buf = std::io::Cursor::new(Vec::new());
        m.to_gray_image().write_to(&mut buf, image::ImageFormat::Png)?;
        self.writes.push((PathBuf::from(rel), buf.into_inner()));
        Ok(())
    }

    fn flush(self, root: &Path) -> Result<()> {
        for (rel, bytes) in self.writes {
            let p = root.join(rel);
            std::fs::write(&p, bytes).at(&p)?;
        }
        Ok(())
    }
}

fn process_image(path: &Path, ctx: &Ctx) -> Result<ImageOutcome> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::invalid(format!("{} has no file stem", path.display())))?;
    let mut out = ImageOutcome::default();
    let quarantine = |object: Option<&str>, stage: &str, e: &Error| QuarantineRecord {
        image: stem.clone(),
        object: object.map(str::to_string),
        stage: stage.to_string(),
        error: e.to_string(),
    };
    let image = match load_rgb(path) {
        Ok(i) => i,
        Err(e) => {
            out.quarantine.push(quarantine(None, "load", &e));
            return Ok(out);
        }
    };
    let input = ImageInput::new(&image, Some(path));
    let c = ctx.clients;
    let detections = match c.tagger.tag(&input).and_then(|labels| c.detector.detect(&input, &labels)) {
        Ok(d) => d,
        Err(e) => {
            out.quarantine.push(quarantine(None, "detect", &e));
            return Ok(out);
        }
    };
    out.detections = detections.len();

    let pol = ctx.policy;
    let mut files = Files { writes: Vec::new() };
    let mut scene = SceneFile {
        stem: stem.clone(),
        input_path: std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()).to_string_lossy().into_owned(),
        image_path: source_rel(&stem),
        width: image.width(),
        height: image.height(),
        objects: Vec::new(),
        groups: Vec::new(),
        rejected: Vec::new(),
    };
    let mut reject = |scene: &mut SceneFile, id: &str, label: &str, reason: &str| {
        scene.rejected.push(Rejection {
            id: id.to_string(),
            label: label.to_string(),
            reason: reason.to_string(),
        });
        out.rejected.push(reason.to_string());
    };

    let mut kept: Vec<(String, ObjectRecord)> = Vec::new();
    let mut pairs: Vec<BuiltPair> = Vec::new();
    for (i, det) in detections.iter().enumerate() {
        let id = format!("o{i}");
        if det.score < pol.detector_score_threshold {
            reject(&mut scene, &id, &det.label, "score");
            continue;
        }
        let obj = c.segmenter.segment(&input, &det.bbox).and_then(|mask| {
            crate::clients::check_segment(&mask, image.width(), image.height(), &det.bbox)?;
            let caption = c.captioner.caption(&input, &det.bbox)?;
            let mut o = ObjectRecord::new(det.label.clone(), caption, det.bbox, mask, ObjectSource::OpenSetTagger);
            o.score = det.score;
            Ok(o)
        });
        let mut obj = match obj {
            Ok(o) => o,
            Err(e) => {
                out.quarantine.push(quarantine(Some(&id), "segment", &e));
                continue;
            }
        };
        if !filter_by_size(&obj, pol) {
            reject(&mut scene, &id, &obj.label, "size");
            continue;
        }
        if !filter_by_keywords(&obj, ctx.blocklist) {
            reject(&mut scene, &id, &obj.label, "keyword");
            continue;
        }
        let base = format!("{stem}_{id}");
        let unit = EditUnit {
            base: base.clone(),
            objects: vec![obj.clone()],
            remove_instructions: vec![Instruction::new(simple_instruction(&obj.label, Task::Remove), Strategy::Simple)],
            add_instructions: vec![Instruction::new(simple_instruction(&obj.label, Task::Add), Strategy::Simple)],
        };
        let pair = match build_pair(&stem, &image, &unit, c.inpainter.as_ref(), pol.dilation_kernel) {
            Ok(p) => p,
            Err(e) => {
                out.quarantine.push(quarantine(Some(&id), "inpaint", &e));
                continue;
            }
        };
        if !check_inpaint_quality(&pair.inpainted, &pair.dilated, &pol.quality)?.pass {
            reject(&mut scene, &id, &obj.label, "quality");
            continue;
        }
        let (pre, post) = (crop(&image, &obj.bbox), crop(&pair.inpainted, &obj.bbox));
        let keep = semantic_filter(&mut obj, &pre, &post, c.embedder.as_ref(), pol.clip_accept_threshold);
        match keep {
            Ok(true) => {}
            Ok(false) => {
                reject(&mut scene, &id, &obj.label, "semantic");
                continue;
            }
            Err(e) => {
                out.quarantine.push(quarantine(Some(&id), "semantic", &e));
                continue;
            }
        }
        let pair = make_pair(&stem, &EditUnit { objects: vec![obj.clone()], ..unit }, pair.dilated, pair.inpainted)?;
        let mask_path = format!("objects/{base}.png");
        files.mask(&mask_path, &obj.mask)?;
        scene.objects.push(SceneObject {
            id: id.clone(),
            label: obj.label.clone(),
            caption: obj.caption.clone(),
            bbox: obj.bbox.to_array(),
            mask_path,
            score: obj.score,
            source: obj.source,
            clip_pre: obj.clip_pre,
            clip_post: obj.clip_post,
            area_fraction: obj.area_fraction,
            sample_base: base,
        });
        kept.push((id, obj));
        pairs.push(pair);
    }
    out.kept = kept.len();

    if pol.multi_instance {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(ctx.seed, &stem));
        let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, (_, o)) in kept.iter().enumerate() {
            by_label.entry(o.label.as_str()).or_default().push(i);
        }
        for (gi, (label, idx)) in by_label.into_iter().filter(|(_, v)| v.len() >= 2).enumerate() {
            let instances: Vec<ObjectRecord> = idx.iter().map(|&i| kept[i].1.clone()).collect();
            let group = multi_instance_plan(&instances, &mut rng)?;
            let gid = format!("g{gi}");
            let base = format!("{stem}_{gid}");
            let text = |t| vec![Instruction::new(multi_instance_instruction(label, group.k, group.direction, t), Strategy::Multi)];
            let unit = EditUnit {
                base: base.clone(),
                objects: group.selected_records(),
                remove_instructions: text(Task::Remove),
                add_instructions: text(Task::Add),
            };
            let pair = match build_pair(&stem, &image, &unit, c.inpainter.as_ref(), pol.dilation_kernel) {
                Ok(p) => p,
                Err(e) => {
                    out.quarantine.push(quarantine(Some(&gid), "inpaint", &e));
                    continue;
                }
            };
            if !check_inpaint_quality(&pair.inpainted, &pair.dilated, &pol.quality)?.pass {
                reject(&mut scene, &gid, label, "quality");
                continue;
            }
            scene.groups.push(SceneGroup {
                label: label.to_string(),
                members: group.selected.iter().map(|&s| kept[idx[s]].0.clone()).collect(),
                instances: instances.len(),
                layout: group.layout,
                direction: group.direction,
                k: group.k,
                sample_base: base,
            });
            pairs.push(pair);
        }
        out.groups = scene.groups.len();
    }

    files.png(&scene.image_path, &image)?;
    for p in &pairs {
        files.png(&p.remove.target_path, &p.inpainted)?;
        files.mask(&p.remove.mask_path, &p.dilated)?;
        out.records.push(ManifestRecord::from_sample(&p.remove, ctx.seed));
        out.records.push(ManifestRecord::from_sample(&p.add, ctx.seed));
    }
    let mut scene_bytes = serde_json::to_vec_pretty(&scene)?;
    scene_bytes.push(b'\n');
    files.writes.push((PathBuf::from(format!("scenes/{stem}.json")), scene_bytes));
    files.flush(ctx.out)?;
    Ok(out)
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Runs stages 1 to 3 over every image in `images`. Images are processed in
/// parallel; outputs are assembled in sorted file order, so a fixed seed
/// with deterministic clients yields byte-identical files.
pub fn run_pipeline(images: &Path, out: &Path, policy: &FilterPolicy, clients: &Clients, seed: u64) -> Result<PipelineSummary> {
    policy.validate()?;
    let blocklist = policy.blocklist()?;
    if !images.is_dir() {
        return Err(Error::config(format!("image directory {} does not exist", images.display())));
    }
    let paths = list_images(images)?;
    for d in ["images", "objects", "masks", "inpainted", "scenes"] {
        let p = out.join(d);
        std::fs::create_dir_all(&p).at(&p)?;
    }
    let ctx = Ctx {
        out,
        policy,
        blocklist: &blocklist,
        clients,
        seed,
    };
    let outcomes: Vec<ImageOutcome> = paths.par_iter().map(|p| process_image(p, &ctx)).collect::<Result<_>>()?;

    let mut summary = PipelineSummary {
        images: paths.len(),
        seed,
        ..Default::default()
    };
    let mut records = Vec::new();
    let mut quarantine = Vec::new();
    for o in outcomes {
        summary.detections += o.detections;
        summary.kept_objects += o.kept;
        summary.groups += o.groups;
        for r in o.rejected {
            *summary.rejected.entry(r).or_default() += 1;
        }
        records.extend(o.records);
        quarantine.extend(o.quarantine);
    }
    summary.samples = records.len();
    summary.quarantined = quarantine.len();
    write_atomic(&out.join("manifest.jsonl"), &manifest_bytes(&records)?)?;
    write_atomic(&out.join("quarantine.jsonl"), &jsonl(&quarantine)?)?;
    let mut s = serde_json::to_vec_pretty(&summary)?;
    s.push(b'\n');
    write_atomic(&out.join("summary.json"), &s)?;
    Ok(summary)
}
