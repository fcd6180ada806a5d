//! Records flowing through the pipeline and the manifest line format.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{BBox, Mask};

pub const PIPELINE_VERSION: &str = "galaxyedit-pipeline/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Add,
    Remove,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Add => "add",
            Task::Remove => "remove",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Simple,
    Attribute,
    Spatial,
    Multi,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "simple" => Ok(Strategy::Simple),
            "attribute" => Ok(Strategy::Attribute),
            "spatial" => Ok(Strategy::Spatial),
            "multi" => Ok(Strategy::Multi),
            other => Err(Error::config(format!("unknown instruction strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectSource {
    DatasetAnnotation,
    OpenSetTagger,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    pub text: String,
    pub strategy: Strategy,
}

impl Instruction {
    pub fn new(text: impl Into<String>, strategy: Strategy) -> Self {
        Self {
            text: text.into(),
            strategy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub label: String,
    pub caption: String,
    pub bbox: BBox,
    pub mask: Mask,
    pub source: ObjectSource,
    pub score: f64,
    pub clip_pre: f64,
    pub clip_post: Option<f64>,
    pub area_fraction: f64,
}

impl ObjectRecord {
    pub fn new(label: impl Into<String>, caption: impl Into<String>, bbox: BBox, mask: Mask, source: ObjectSource) -> Self {
        let area_fraction = mask.area_fraction();
        Self {
            label: label.into(),
            caption: caption.into(),
            bbox,
            mask,
            source,
            score: 1.0,
            clip_pre: 0.0,
            clip_post: None,
            area_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSample {
    pub sample_id: String,
    pub task: Task,
    pub source_path: String,
    pub target_path: String,
    pub mask_path: String,
    pub instructions: Vec<Instruction>,
    pub objects: Vec<ObjectRecord>,
    pub combined_mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub label: String,
    pub caption: String,
    pub bbox: [u32; 4],
    pub clip_pre: f64,
    pub clip_post: Option<f64>,
    pub area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub pipeline_version: String,
    pub seed: u64,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub sample_id: String,
    pub task: Task,
    pub source_path: String,
    pub target_path: String,
    pub mask_path: String,
    pub instructions: Vec<Instruction>,
    pub object: ManifestObject,
    pub provenance: Provenance,
}

impl ManifestRecord {
    pub fn from_sample(s: &EditSample, seed: u64) -> Self {
        let n = s.objects.len().max(1) as f64;
        let object = match s.objects.as_slice() {
            [o] => ManifestObject {
                label: o.label.clone(),
                caption: o.caption.clone(),
                bbox: o.bbox.to_array(),
                clip_pre: o.clip_pre,
                clip_post: o.clip_post,
                area_fraction: o.area_fraction,
            },
            // Groups: union box, mean scores, area of the OR-ed mask.
            objs => {
                let bbox = objs.iter().skip(1).fold(objs[0].bbox, |a, o| BBox {
                    x0: a.x0.min(o.bbox.x0),
                    y0: a.y0.min(o.bbox.y0),
                    x1: a.x1.max(o.bbox.x1),
                    y1: a.y1.max(o.bbox.y1),
                });
                let post: Option<Vec<f64>> = objs.iter().map(|o| o.clip_post).collect();
                let union = objs
                    .iter()
                    .skip(1)
                    .try_fold(objs[0].mask.clone(), |m, o| m.or(&o.mask))
                    .expect("group masks share a size");
                ManifestObject {
                    label: objs[0].label.clone(),
                    caption: objs[0].label.clone(),
                    bbox: bbox.to_array(),
                    clip_pre: objs.iter().map(|o| o.clip_pre).sum::<f64>() / n,
                    clip_post: post.map(|p| p.iter().sum::<f64>() / n),
                    area_fraction: union.area_fraction(),
                }
            }
        };
        Self {
            sample_id: s.sample_id.clone(),
            task: s.task,
            source_path: s.source_path.clone(),
            target_path: s.target_path.clone(),
            mask_path: s.mask_path.clone(),
            instructions: s.instructions.clone(),
            object,
            provenance: Provenance {
                pipeline_version: PIPELINE_VERSION.to_string(),
                seed,
            },
        }
    }

    pub fn bbox(&self) -> Result<BBox> {
        let b = self.object.bbox;
        BBox::new(b[0], b[1], b[2], b[3])
    }
}

/// Per-image record under `scenes/<stem>.json`: every kept object and
/// group, and why the others were dropped. Paths are relative to the
/// output root except `input_path`, which is where the image was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub stem: String,
    pub input_path: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
    pub groups: Vec<SceneGroup>,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: String,
    pub label: String,
    pub caption: String,
    pub bbox: [u32; 4],
    /// The undilated instance mask.
    pub mask_path: String,
    pub score: f64,
    pub source: ObjectSource,
    pub clip_pre: f64,
    pub clip_post: Option<f64>,
    pub area_fraction: f64,
    /// Sample ids are this plus `_remove` or `_add`.
    pub sample_base: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGroup {
    pub label: String,
    /// Ids of the selected instances.
    pub members: Vec<String>,
    pub instances: usize,
    pub layout: crate::instructions::Layout,
    pub direction: crate::instructions::Direction,
    pub k: usize,
    pub sample_base: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rejection {
    pub id: String,
    pub label: String,
    pub reason: String,
}

impl SceneFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

impl SceneObject {
    pub fn to_record(&self, root: &Path) -> Result<ObjectRecord> {
        let b = self.bbox;
        Ok(ObjectRecord {
            label: self.label.clone(),
            caption: self.caption.clone(),
            bbox: BBox::new(b[0], b[1], b[2], b[3])?,
            mask: Mask::load_png(&root.join(&self.mask_path))?,
            source: self.source,
            score: self.score,
            clip_pre: self.clip_pre,
            clip_post: self.clip_post,
            area_fraction: self.area_fraction,
        })
    }
}

/// `(base, task)` from an id ending in `_remove` or `_add`.
pub fn split_sample_id(id: &str) -> Option<(&str, Task)> {
    id.strip_suffix("_remove")
        .map(|b| (b, Task::Remove))
        .or_else(|| id.strip_suffix("_add").map(|b| (b, Task::Add)))
}

/// Reads a JSON-lines manifest; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn manifest_bytes(records: &[ManifestRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Replaces `path` atomically: write a sibling temp file, fsync, rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp).at(&tmp)?;
        f.write_all(bytes).at(&tmp)?;
        f.sync_all().at(&tmp)?;
    }
    std::fs::rename(&tmp, path).at(path)
}

/// Parsed `--strategies a,b,c`.
pub fn parse_strategies(s: &str) -> Result<BTreeSet<Strategy>> {
    let set: BTreeSet<Strategy> = s.split(',').filter(|t| !t.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if set.is_empty() {
        return Err(Error::config("no instruction strategies given"));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_parse() {
        let s = parse_strategies("simple,attribute,spatial,multi").unwrap();
        assert_eq!(s.len(), 4);
        assert!(parse_strategies("simple,bogus").is_err());
        assert!(parse_strategies("").is_err());
    }

    #[test]
    fn manifest_rejects_extra_fields() {
        let line = r#"{"sample_id":"a","task":"remove","source_path":"s","target_path":"t","mask_path":"m","instructions":[{"text":"remove the cat","strategy":"simple"}],"object":{"label":"cat","caption":"black cat","bbox":[0,0,2,2],"clip_pre":0.9,"clip_post":0.1,"area_fraction":0.01},"provenance":{"pipeline_version":"v","seed":1}}"#;
        let r: ManifestRecord = serde_json::from_str(line).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), line);
        let extra = line.replacen("{\"sample_id\"", "{\"x\":1,\"sample_id\"", 1);
        assert!(serde_json::from_str::<ManifestRecord>(&extra).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
