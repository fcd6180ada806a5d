//! Whole-manifest consistency check.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{read_manifest, split_sample_id, ManifestRecord, Task, PIPELINE_VERSION};
use crate::error::Result;
use crate::imaging::{load_rgb, Mask};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub pairs: usize,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

fn read(root: &Path, rel: &str) -> std::result::Result<Vec<u8>, String> {
    if Path::new(rel).is_absolute() {
        return Err(format!("path {rel:?} is absolute"));
    }
    std::fs::read(root.join(rel)).map_err(|e| format!("{rel}: {e}"))
}

fn check_record(r: &ManifestRecord, root: &Path) -> Vec<String> {
    let mut errs = Vec::new();
    let id = &r.sample_id;
    match split_sample_id(id) {
        Some((_, t)) if t == r.task => {}
        _ => errs.push(format!("{id}: id suffix does not match task {}", r.task.name())),
    }
    if r.instructions.is_empty() {
        errs.push(format!("{id}: no instructions"));
    }
    for ins in &r.instructions {
        if ins.text.trim().is_empty() || !ins.text.starts_with(r.task.name()) {
            errs.push(format!("{id}: instruction {:?} does not start with the task", ins.text));
        }
    }
    if r.provenance.pipeline_version != PIPELINE_VERSION {
        errs.push(format!("{id}: unknown pipeline version {:?}", r.provenance.pipeline_version));
    }
    let o = &r.object;
    if !(0.0..=1.0).contains(&o.area_fraction) {
        errs.push(format!("{id}: area fraction {} outside [0, 1]", o.area_fraction));
    }
    let bbox = match r.bbox() {
        Ok(b) => Some(b),
        Err(e) => {
            errs.push(format!("{id}: {e}"));
            None
        }
    };
    for p in [&r.source_path, &r.target_path, &r.mask_path] {
        if let Err(e) = read(root, p) {
            errs.push(format!("{id}: {e}"));
        }
    }
    if !errs.is_empty() {
        return errs;
    }
    let loaded = (|| -> Result<_> {
        let src = load_rgb(&root.join(&r.source_path))?;
        let tgt = load_rgb(&root.join(&r.target_path))?;
        let mask = Mask::load_png(&root.join(&r.mask_path))?;
        Ok((src, tgt, mask))
    })();
    let (src, tgt, mask) = match loaded {
        Ok(v) => v,
        Err(e) => return vec![format!("{id}: {e}")],
    };
    if src.dimensions() != tgt.dimensions() || (mask.width() as u32, mask.height() as u32) != src.dimensions() {
        return vec![format!("{id}: source, target and mask sizes differ")];
    }
    if let Some(b) = bbox {
        if !b.within(src.width(), src.height()) {
            errs.push(format!("{id}: bbox outside the image"));
        }
    }
    let outside = src
        .enumerate_pixels()
        .filter(|(x, y, p)| !mask.get(*x as usize, *y as usize) && tgt.get_pixel(*x, *y) != *p)
        .count();
    if outside > 0 {
        errs.push(format!("{id}: {outside} pixels differ outside the mask"));
    }
    if src == tgt {
        errs.push(format!("{id}: source and target are identical"));
    }
    errs
}

/// Re-checks every record: unique ids, relative paths that exist, edits
/// confined to the mask, and each remove sample paired with an add sample
/// whose source and target are byte-wise swapped.
pub fn validate_manifest(path: &Path) -> Result<ValidationReport> {
    let root = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let records = read_manifest(path)?;
    let mut report = ValidationReport {
        records: records.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut by_base: BTreeMap<&str, [Option<&ManifestRecord>; 2]> = BTreeMap::new();
    for r in &records {
        if !seen.insert(r.sample_id.as_str()) {
            report.errors.push(format!("{}: duplicate sample id", r.sample_id));
        }
        report.errors.extend(check_record(r, root));
        if let Some((base, task)) = split_sample_id(&r.sample_id) {
            by_base.entry(base).or_default()[usize::from(task == Task::Add)] = Some(r);
        }
    }
    for (base, pair) in by_base {
        let (Some(rm), Some(add)) = (pair[0], pair[1]) else {
            report.errors.push(format!("{base}: remove and add samples are not both present"));
            continue;
        };
        let bytes = |p: &str| read(root, p).ok();
        let swapped = bytes(&add.source_path).is_some()
            && bytes(&add.source_path) == bytes(&rm.target_path)
            && bytes(&add.target_path) == bytes(&rm.source_path);
        if !swapped {
            report.errors.push(format!("{base}: add sample is not the swap of the remove sample"));
        }
        if rm.mask_path != add.mask_path || rm.object != add.object {
            report.errors.push(format!("{base}: remove and add samples disagree on mask or object"));
        }
        report.pairs += 1;
    }
    Ok(report)
}
