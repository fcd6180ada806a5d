//! `instructions gen`: append generated instructions to a manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::spatial::{assign_predicate, caption_to_label, nearest_adjacent, Intrinsics, SceneObject3D, DEFAULT_MARGIN};
use super::templates::{attribute_instruction, multi_instance_instruction, simple_instruction, spatial_instruction, Predicate};
use crate::clients::{DepthEstimator, ImageInput, LabelExtractor};
use crate::error::{Error, Result};
use crate::imaging::load_rgb;
use crate::pipeline::types::{
    manifest_bytes, read_manifest, split_sample_id, write_atomic, Instruction, SceneFile, Strategy,
};

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub strategies: BTreeSet<Strategy>,
    pub margin: f64,
    /// Overrides the per-image default camera.
    pub intrinsics: Option<Intrinsics>,
}

impl GenConfig {
    pub fn new(strategies: BTreeSet<Strategy>) -> Self {
        Self {
            strategies,
            margin: DEFAULT_MARGIN,
            intrinsics: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenSummary {
    pub records: usize,
    pub added: BTreeMap<Strategy, usize>,
    /// Objects whose geometry met no predicate with enough margin.
    pub spatial_ambiguous: usize,
    /// Objects alone in their scene or with an uncaptioned neighbour.
    pub spatial_no_anchor: usize,
    /// Subject labels produced by the head-noun rule after an LLM failure.
    pub label_fallbacks: usize,
    pub depth_skipped_pixels: usize,
}

/// Subject label, predicate and anchor caption per object id.
type SpatialFacts = HashMap<String, Option<(String, Predicate, String)>>;

#[derive(Default)]
struct SceneSpatial {
    facts: SpatialFacts,
    ambiguous: usize,
    no_anchor: usize,
    fallbacks: usize,
    skipped: usize,
}

fn load_scenes(root: &Path) -> Result<Vec<SceneFile>> {
    let dir = root.join("scenes");
    if !dir.is_dir() {
        return Err(Error::NotFound(format!("scene directory {}", dir.display())));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| SceneFile::load(p)).collect()
}

fn scene_spatial(
    scene: &SceneFile,
    root: &Path,
    cfg: &GenConfig,
    depth: &dyn DepthEstimator,
    llm: &dyn LabelExtractor,
) -> Result<SceneSpatial> {
    let mut out = SceneSpatial::default();
    if scene.objects.len() < 2 {
        out.no_anchor = scene.objects.len();
        out.facts = scene.objects.iter().map(|o| (o.id.clone(), None)).collect();
        return Ok(out);
    }
    let image_path = root.join(&scene.image_path);
    let image = load_rgb(&image_path)?;
    let input = PathBuf::from(&scene.input_path);
    let lookup = if input.exists() { input } else { image_path };
    let d = depth.estimate_depth(&ImageInput::new(&image, Some(&lookup)))?;
    let intr = cfg.intrinsics.unwrap_or_else(|| Intrinsics::default_for(d.depth.width, d.depth.height));
    let mut objs = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let rec = o.to_record(root)?;
        let cloud = super::spatial::project_to_pointcloud(&d.depth, &rec.mask, &intr)?;
        out.skipped += cloud.skipped;
        objs.push(SceneObject3D::new(rec, cloud.points)?);
    }
    for (i, o) in scene.objects.iter().enumerate() {
        let fact = match nearest_adjacent(&objs, i) {
            Some(j) if !objs[j].record.caption.trim().is_empty() => match assign_predicate(&objs[i], &objs[j], cfg.margin) {
                Some(p) => {
                    let label = caption_to_label(&o.caption, llm)?;
                    out.fallbacks += usize::from(label.fallback);
                    Some((label.label, p.value, objs[j].record.caption.clone()))
                }
                None => {
                    out.ambiguous += 1;
                    None
                }
            },
            _ => {
                out.no_anchor += 1;
                None
            }
        };
        out.facts.insert(o.id.clone(), fact);
    }
    Ok(out)
}

/// Generates the requested strategies for every record and rewrites the
/// manifest atomically. Entries already present are not duplicated.
pub fn generate(
    manifest: &Path,
    cfg: &GenConfig,
    depth: &dyn DepthEstimator,
    llm: &dyn LabelExtractor,
) -> Result<GenSummary> {
    let root = manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut records = read_manifest(manifest)?;
    let scenes = load_scenes(root)?;

    let mut owner: HashMap<&str, (usize, bool)> = HashMap::new();
    for (si, s) in scenes.iter().enumerate() {
        for o in &s.objects {
            owner.insert(&o.sample_base, (si, false));
        }
        for g in &s.groups {
            owner.insert(&g.sample_base, (si, true));
        }
    }

    let mut summary = GenSummary {
        records: records.len(),
        ..GenSummary::default()
    };
    let spatial: Vec<SceneSpatial> = if cfg.strategies.contains(&Strategy::Spatial) {
        scenes
            .par_iter()
            .map(|s| scene_spatial(s, root, cfg, depth, llm))
            .collect::<Result<_>>()?
    } else {
        scenes.iter().map(|_| SceneSpatial::default()).collect()
    };
    for s in &spatial {
        summary.spatial_ambiguous += s.ambiguous;
        summary.spatial_no_anchor += s.no_anchor;
        summary.label_fallbacks += s.fallbacks;
        summary.depth_skipped_pixels += s.skipped;
    }

    for rec in &mut records {
        let (base, task) = split_sample_id(&rec.sample_id)
            .ok_or_else(|| Error::config(format!("sample id {:?} lacks a task suffix", rec.sample_id)))?;
        if task != rec.task {
            return Err(Error::config(format!("sample id {:?} disagrees with task {}", rec.sample_id, rec.task.name())));
        }
        let &(si, is_group) = owner
            .get(base)
            .ok_or_else(|| Error::NotFound(format!("no scene entry for sample {:?}", rec.sample_id)))?;
        let scene = &scenes[si];
        let mut generated: Vec<Instruction> = Vec::new();
        if is_group {
            let g = scene.groups.iter().find(|g| g.sample_base == base).expect("indexed above");
            if cfg.strategies.contains(&Strategy::Multi) {
                generated.push(Instruction::new(multi_instance_instruction(&g.label, g.k, g.direction, task), Strategy::Multi));
            }
        } else {
            let o = scene.objects.iter().find(|o| o.sample_base == base).expect("indexed above");
            for strategy in &cfg.strategies {
                let text = match strategy {
                    Strategy::Simple => Some(simple_instruction(&o.label, task)),
                    Strategy::Attribute => Some(attribute_instruction(&o.caption, &o.label, task)),
                    Strategy::Spatial => spatial[si]
                        .facts
                        .get(&o.id)
                        .cloned()
                        .flatten()
                        .and_then(|(label, pred, anchor)| spatial_instruction(&label, pred, &anchor, task)),
                    Strategy::Multi => None,
                };
                if let Some(t) = text {
                    generated.push(Instruction::new(t, *strategy));
                }
            }
        }
        for ins in generated {
            if !rec.instructions.contains(&ins) {
                *summary.added.entry(ins.strategy).or_default() += 1;
                rec.instructions.push(ins);
            }
        }
    }
    write_atomic(manifest, &manifest_bytes(&records)?)?;
    Ok(summary)
}

