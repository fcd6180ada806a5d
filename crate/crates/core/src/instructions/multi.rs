//! Multi-instance edits: layout from box spread, take-k from one edge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::templates::Direction;
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::pipeline::types::ObjectRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGroup {
    pub class_label: String,
    pub instances: Vec<ObjectRecord>,
    pub layout: Layout,
    pub direction: Direction,
    pub k: usize,
    /// Indices into `instances`, nearest the chosen edge first.
    pub selected: Vec<usize>,
    pub combined_mask: Mask,
}

impl InstanceGroup {
    pub fn selected_records(&self) -> Vec<ObjectRecord> {
        self.selected.iter().map(|&i| self.instances[i].clone()).collect()
    }
}

pub fn layout_of(instances: &[ObjectRecord]) -> Layout {
    let spread = |f: &dyn Fn(&ObjectRecord) -> f64| {
        let (lo, hi) = instances.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    if spread(&|o| o.bbox.center().0) >= spread(&|o| o.bbox.center().1) {
        Layout::Horizontal
    } else {
        Layout::Vertical
    }
}

fn check(instances: &[ObjectRecord]) -> Result<()> {
    if instances.len() < 2 {
        return Err(Error::invalid("a multi-instance group needs at least two instances"));
    }
    if instances.iter().any(|o| o.label != instances[0].label) {
        return Err(Error::invalid("multi-instance group mixes classes"));
    }
    Ok(())
}

/// Group with a given direction and count.
pub fn plan_with(instances: &[ObjectRecord], direction: Direction, k: usize) -> Result<InstanceGroup> {
    check(instances)?;
    if k == 0 || k > instances.len() {
        return Err(Error::invalid(format!("k = {k} outside [1, {}]", instances.len())));
    }
    let layout = layout_of(instances);
    let fits = matches!(
        (layout, direction),
        (Layout::Horizontal, Direction::Left | Direction::Right) | (Layout::Vertical, Direction::Top | Direction::Bottom)
    );
    if !fits {
        return Err(Error::invalid(format!("direction {} does not match the {layout:?} layout", direction.name())));
    }
    let key = |o: &ObjectRecord| {
        let (cx, cy) = o.bbox.center();
        match direction {
            Direction::Left => cx,
            Direction::Right => -cx,
            Direction::Top => cy,
            Direction::Bottom => -cy,
        }
    };
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| key(&instances[a]).total_cmp(&key(&instances[b])).then(a.cmp(&b)));
    order.truncate(k);
    let combined_mask = order
        .iter()
        .skip(1)
        .try_fold(instances[order[0]].mask.clone(), |m, &i| m.or(&instances[i].mask))?;
    Ok(InstanceGroup {
        class_label: instances[0].label.clone(),
        instances: instances.to_vec(),
        layout,
        direction,
        k,
        selected: order,
        combined_mask,
    })
}

/// Layout from the spread of box centres; direction and `k` sampled.
pub fn multi_instance_plan<R: Rng + ?Sized>(instances: &[ObjectRecord], rng: &mut R) -> Result<InstanceGroup> {
    check(instances)?;
    let direction = match (layout_of(instances), rng.random_bool(0.5)) {
        (Layout::Horizontal, true) => Direction::Left,
        (Layout::Horizontal, false) => Direction::Right,
        (Layout::Vertical, true) => Direction::Top,
        (Layout::Vertical, false) => Direction::Bottom,
    };
    let k = rng.random_range(1..=instances.len());
    plan_with(instances, direction, k)
}
