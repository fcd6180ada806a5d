//! Per-model, per-task averages rounded half-up to one decimal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::service::resolve;
use super::store::{read_entries, Entry};
use super::{ModelTag, SampleSet};
use crate::error::Result;
use crate::pipeline::types::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: ModelTag,
    pub remove: Option<f64>,
    pub add: Option<f64>,
    pub n_remove: usize,
    pub n_add: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingReport {
    pub rows: Vec<ReportRow>,
    /// Over both tasks.
    pub ground_truth: Option<f64>,
    pub n_ground_truth: usize,
    pub total: usize,
}

/// `sum / n` rounded half-up to one decimal, exactly.
pub fn round_mean(sum: u64, n: u64) -> Option<f64> {
    (n > 0).then(|| ((20 * sum + n) / (2 * n)) as f64 / 10.0)
}

pub fn aggregate(ratings: &[(ModelTag, Task, u8)]) -> RatingReport {
    let mut cells: BTreeMap<(ModelTag, Task), (u64, u64)> = BTreeMap::new();
    let mut gt = (0u64, 0u64);
    for &(m, t, r) in ratings {
        if m == ModelTag::GroundTruth {
            gt.0 += u64::from(r);
            gt.1 += 1;
        } else {
            let c = cells.entry((m, t)).or_default();
            c.0 += u64::from(r);
            c.1 += 1;
        }
    }
    let cell = |m, t| cells.get(&(m, t)).copied().unwrap_or((0, 0));
    let rows = ModelTag::ALL
        .iter()
        .filter(|&&m| m != ModelTag::GroundTruth)
        .filter(|&&m| cell(m, Task::Remove).1 + cell(m, Task::Add).1 > 0)
        .map(|&m| {
            let (rs, rn) = cell(m, Task::Remove);
            let (a_s, an) = cell(m, Task::Add);
            ReportRow {
                model: m,
                remove: round_mean(rs, rn),
                add: round_mean(a_s, an),
                n_remove: rn as usize,
                n_add: an as usize,
            }
        })
        .collect();
    RatingReport {
        rows,
        ground_truth: round_mean(gt.0, gt.1),
        n_ground_truth: gt.1 as usize,
        total: ratings.len(),
    }
}

impl RatingReport {
    pub fn get(&self, m: ModelTag, t: Task) -> Option<f64> {
        let row = self.rows.iter().find(|r| r.model == m)?;
        match t {
            Task::Remove => row.remove,
            Task::Add => row.add,
        }
    }

    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let mut s = format!("{:<28}{:>8}{:>8}\n", "", "Remove", "Add");
        for r in &self.rows {
            let _ = writeln!(s, "{:<28}{:>8}{:>8}", r.model.name(), f(r.remove), f(r.add));
        }
        let _ = writeln!(s, "{:<28}{:>8}", "Average Ground Truth Rating", f(self.ground_truth));
        s
    }
}

/// Recomputes the report straight from a log file.
pub fn report_from_log(samples: &SampleSet, log: &Path) -> Result<RatingReport> {
    let mut seen = std::collections::HashSet::new();
    let mut ratings = Vec::new();
    for e in read_entries(log)? {
        if let Entry::Rating(r) = e {
            if seen.insert((r.session_id.clone(), r.item_id.clone(), r.blind_id.clone())) {
                ratings.push(resolve(samples, &r)?);
            }
        }
    }
    Ok(aggregate(&ratings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_mean(16, 10), Some(1.6));
        assert_eq!(round_mean(3, 2), Some(1.5));
        // 1.25 and 1.35 round up, where binary floats could go either way.
        assert_eq!(round_mean(5, 4), Some(1.3));
        assert_eq!(round_mean(27, 20), Some(1.4));
        assert_eq!(round_mean(29, 20), Some(1.5));
        assert_eq!(round_mean(0, 0), None);
    }

    #[test]
    fn all_fives_and_permutation_invariance() {
        let mut v = vec![
            (ModelTag::Ip2p, Task::Add, 5),
            (ModelTag::GalaxyEdit, Task::Remove, 5),
            (ModelTag::GroundTruth, Task::Add, 5),
        ];
        let r = aggregate(&v);
        assert!(r.rows.iter().all(|row| row.remove.unwrap_or(5.0) == 5.0 && row.add.unwrap_or(5.0) == 5.0));
        assert_eq!(r.ground_truth, Some(5.0));
        v.push((ModelTag::Ip2p, Task::Add, 2));
        let a = aggregate(&v);
        v.reverse();
        assert_eq!(a, aggregate(&v));
    }
}
