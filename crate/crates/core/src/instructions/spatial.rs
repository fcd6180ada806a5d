//! Depth to metric point clouds, robust 3D boxes and predicate assignment.

use serde::{Deserialize, Serialize};

use super::templates::Predicate;
use crate::clients::LabelExtractor;
use crate::error::{Error, Result};
use crate::imaging::{Mask, Plane};
use crate::pipeline::types::ObjectRecord;

/// Pinhole camera in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// `fx = fy = max(W, H)`, principal point at the image centre.
    pub fn default_for(width: usize, height: usize) -> Self {
        let f = width.max(height) as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) && self.fx > 0.0 && self.fy > 0.0;
        if !ok {
            return Err(Error::config("intrinsics need finite values and positive focal lengths"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Masked pixels dropped for non-positive or non-finite depth.
    pub skipped: usize,
}

pub fn project_to_pointcloud(depth: &Plane, mask: &Mask, intr: &Intrinsics) -> Result<PointCloud> {
    if (depth.width, depth.height) != (mask.width(), mask.height()) {
        return Err(Error::invalid(format!(
            "depth is {}x{} but mask is {}x{}",
            depth.width,
            depth.height,
            mask.width(),
            mask.height()
        )));
    }
    intr.validate()?;
    let mut cloud = PointCloud::default();
    for v in 0..mask.height() {
        for u in 0..mask.width() {
            if !mask.get(u, v) {
                continue;
            }
            let d = f64::from(depth.get(u, v));
            if !(d.is_finite() && d > 0.0) {
                cloud.skipped += 1;
                continue;
            }
            cloud.points.push([(u as f64 - intr.cx) * d / intr.fx, (v as f64 - intr.cy) * d / intr.fy, d]);
        }
    }
    Ok(cloud)
}

/// Linear-interpolated percentile of sorted values, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const ROBUST_LOW: f64 = 0.05;
pub const ROBUST_HIGH: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject3D {
    pub record: ObjectRecord,
    pub points: Vec<[f64; 3]>,
    /// Per axis `[min, max]`, from the 5th and 95th percentiles.
    pub bbox3d: [[f64; 2]; 3],
    pub centroid: [f64; 3],
}

impl SceneObject3D {
    pub fn new(record: ObjectRecord, points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid(format!("object {:?} has no valid 3D points", record.label)));
        }
        let n = points.len() as f64;
        let mut bbox3d = [[0.0; 2]; 3];
        let mut centroid = [0.0; 3];
        for axis in 0..3 {
            let mut vals: Vec<f64> = points.iter().map(|p| p[axis]).collect();
            vals.sort_by(f64::total_cmp);
            bbox3d[axis] = [percentile(&vals, ROBUST_LOW), percentile(&vals, ROBUST_HIGH)];
            centroid[axis] = vals.iter().sum::<f64>() / n;
        }
        Ok(Self {
            record,
            points,
            bbox3d,
            centroid,
        })
    }

    pub fn from_depth(record: ObjectRecord, depth: &Plane, intr: &Intrinsics) -> Result<Self> {
        let cloud = project_to_pointcloud(depth, &record.mask, intr)?;
        Self::new(record, cloud.points)
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.bbox3d[axis][1] - self.bbox3d[axis][0]
    }
}

pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialPredicate {
    pub value: Predicate,
    /// Normalized lead of the dominant axis over the runner-up.
    pub dominance: f64,
}

/// Per-axis `|Δ|` over the mean extent of the two boxes on that axis.
pub fn normalized_displacement(a: &SceneObject3D, b: &SceneObject3D) -> [f64; 3] {
    std::array::from_fn(|axis| {
        let delta = (a.centroid[axis] - b.centroid[axis]).abs();
        let mean_extent = (a.extent(axis) + b.extent(axis)) / 2.0;
        delta / mean_extent.max(1e-9)
    })
}

/// Where `a` sits relative to `b`. `None` when no axis leads the runner-up
/// by more than `margin`.
pub fn assign_predicate(a: &SceneObject3D, b: &SceneObject3D, margin: f64) -> Option<SpatialPredicate> {
    let n = normalized_displacement(a, b);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| n[j].total_cmp(&n[i]));
    let (best, second) = (order[0], order[1]);
    let dominance = n[best] - n[second];
    if !(dominance > margin) {
        return None;
    }
    let negative = a.centroid[best] < b.centroid[best];
    let value = match (best, negative) {
        (0, true) => Predicate::Left,
        (0, false) => Predicate::Right,
        (1, true) => Predicate::Above,
        (1, false) => Predicate::Below,
        (_, true) => Predicate::Front,
        (_, false) => Predicate::Behind,
    };
    Some(SpatialPredicate { value, dominance })
}

/// Index of the object nearest to `objects[i]` by centroid distance; ties go
/// to the lower index.
pub fn nearest_adjacent(objects: &[SceneObject3D], i: usize) -> Option<usize> {
    let c = objects.get(i)?.centroid;
    objects
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(j, o)| (j, (0..3).map(|k| (o.centroid[k] - c[k]).powi(2)).sum::<f64>()))
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
        .map(|(j, _)| j)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelOutcome {
    pub label: String,
    /// The LLM failed and the head-noun rule answered instead.
    pub fallback: bool,
}

pub fn caption_to_label(caption: &str, llm: &dyn LabelExtractor) -> Result<LabelOutcome> {
    if caption.trim().is_empty() {
        return Err(Error::invalid("cannot extract a label from an empty caption"));
    }
    match llm.extract_label(caption) {
        Ok(l) if !l.trim().is_empty() => Ok(LabelOutcome {
            label: l.trim().to_lowercase(),
            fallback: false,
        }),
        _ => Ok(LabelOutcome {
            label: crate::clients::head_noun(caption)?,
            fallback: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::mock::MockLlm;
    use crate::imaging::BBox;
    use crate::pipeline::types::ObjectSource;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record() -> ObjectRecord {
        ObjectRecord::new("x", "an x", BBox::new(0, 0, 1, 1).unwrap(), Mask::new(1, 1), ObjectSource::OpenSetTagger)
    }

    fn object(centre: [f64; 3], half: [f64; 3]) -> SceneObject3D {
        let mut pts = Vec::new();
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    pts.push([centre[0] + sx * half[0], centre[1] + sy * half[1], centre[2] + sz * half[2]]);
                }
            }
        }
        SceneObject3D::new(record(), pts).unwrap()
    }

    #[test]
    fn principal_ray_and_unit_angle() {
        let intr = Intrinsics::default_for(8, 8);
        assert_eq!((intr.fx, intr.cx), (8.0, 4.0));
        let depth = Plane::from_fn(8, 8, |_, _| 2.0);
        let mut m = Mask::new(8, 8);
        m.set(4, 4, true);
        assert_eq!(project_to_pointcloud(&depth, &m, &intr).unwrap().points, vec![[0.0, 0.0, 2.0]]);
        let intr = Intrinsics {
            fx: 3.0,
            fy: 3.0,
            cx: 1.0,
            cy: 1.0,
        };
        let depth = Plane::from_fn(8, 8, |_, _| 1.0);
        let mut m = Mask::new(8, 8);
        m.set(4, 1, true);
        assert_eq!(project_to_pointcloud(&depth, &m, &intr).unwrap().points, vec![[1.0, 0.0, 1.0]]);
    }

    #[test]
    fn projection_matches_loop_oracle_and_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (13, 9);
        let depth = Plane {
            width: w,
            height: h,
            data: (0..w * h).map(|_| rng.random_range(-0.5f32..5.0)).collect(),
        };
        let mask = Mask::from_fn(w, h, |x, y| (x * 7 + y * 3) % 4 != 0);
        let intr = Intrinsics {
            fx: 11.0,
            fy: 9.5,
            cx: 6.2,
            cy: 4.1,
        };
        let cloud = project_to_pointcloud(&depth, &mask, &intr).unwrap();
        let mut expected = Vec::new();
        let mut skipped = 0;
        for idx in 0..w * h {
            let (u, v) = (idx % w, idx / w);
            if !mask.data()[idx] {
                continue;
            }
            let d = depth.data[idx] as f64;
            if d <= 0.0 {
                skipped += 1;
                continue;
            }
            expected.push([(u as f64 - 6.2) * d / 11.0, (v as f64 - 4.1) * d / 9.5, d]);
        }
        assert_eq!(cloud.skipped, skipped);
        assert_eq!(cloud.points.len(), expected.len());
        for (p, e) in cloud.points.iter().zip(&expected) {
            for k in 0..3 {
                assert!((p[k] - e[k]).abs() < 1e-12);
            }
        }
        let doubled = Plane::from_fn(w, h, |x, y| depth.get(x, y) * 2.0);
        let c2 = project_to_pointcloud(&doubled, &mask, &intr).unwrap();
        for (p, q) in cloud.points.iter().zip(&c2.points) {
            for k in 0..3 {
                assert!((2.0 * p[k] - q[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(project_to_pointcloud(&Plane::new(4, 4), &Mask::new(4, 5), &Intrinsics::default_for(4, 4)).is_err());
    }

    #[test]
    fn robust_box_ignores_outliers() {
        let mut pts: Vec<[f64; 3]> = (0..100).map(|i| [i as f64 / 99.0, 0.0, 1.0]).collect();
        pts.push([1000.0, 0.0, 1.0]);
        let o = SceneObject3D::new(record(), pts).unwrap();
        assert!(o.bbox3d[0][1] < 1.0);
        assert!(o.bbox3d[0][0] <= o.bbox3d[0][1]);
        assert!(SceneObject3D::new(record(), Vec::new()).is_err());
    }

    #[test]
    fn single_axis_predicates() {
        let b = object([0.0; 3], [0.5; 3]);
        let p = |c| assign_predicate(&object(c, [0.5; 3]), &b, 0.1).map(|p| p.value);
        assert_eq!(p([-2.0, 0.0, 0.0]), Some(Predicate::Left));
        assert_eq!(p([2.0, 0.0, 0.0]), Some(Predicate::Right));
        assert_eq!(p([0.0, -2.0, 0.0]), Some(Predicate::Above));
        assert_eq!(p([0.0, 2.0, 0.0]), Some(Predicate::Below));
        assert_eq!(p([0.0, 0.0, -3.0]), Some(Predicate::Front));
        assert_eq!(p([0.0, 0.0, 3.0]), Some(Predicate::Behind));
        assert_eq!(p([2.0, 2.0, 0.0]), None);
        assert_eq!(p([0.0, 0.0, 0.0]), None);
    }

    /// The same rule written with explicit loops.
    fn oracle(a: &[[f64; 3]], b: &[[f64; 3]], margin: f64) -> Option<Predicate> {
        let stats = |pts: &[[f64; 3]], axis: usize| {
            let mut v: Vec<f64> = Vec::new();
            for p in pts {
                v.push(p[axis]);
            }
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let q = |f: f64| {
                let pos = f * (v.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
            };
            let mut s = 0.0;
            for x in &v {
                s += x;
            }
            (s / v.len() as f64, q(0.95) - q(0.05))
        };
        let mut n = [0.0; 3];
        let mut d = [0.0; 3];
        for axis in 0..3 {
            let (ca, ea) = stats(a, axis);
            let (cb, eb) = stats(b, axis);
            d[axis] = ca - cb;
            let mut mean = (ea + eb) / 2.0;
            if mean < 1e-9 {
                mean = 1e-9;
            }
            n[axis] = d[axis].abs() / mean;
        }
        let mut best = 0;
        for axis in 1..3 {
            if n[axis] > n[best] {
                best = axis;
            }
        }
        let mut second = f64::NEG_INFINITY;
        for axis in 0..3 {
            if axis != best && n[axis] > second {
                second = n[axis];
            }
        }
        if n[best] - second <= margin {
            return None;
        }
        let names = [[Predicate::Left, Predicate::Right], [Predicate::Above, Predicate::Below], [Predicate::Front, Predicate::Behind]];
        Some(names[best][usize::from(d[best] >= 0.0)])
    }

    #[test]
    fn random_scenes_match_oracle_and_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..1.5));
            (0..rng.random_range(5..40))
                .map(|_| std::array::from_fn(|k| c[k] + rng.random_range(-s[k]..s[k])))
                .collect()
        };
        let mut emitted = 0;
        for _ in 0..500 {
            let (pa, pb) = (cloud(&mut rng), cloud(&mut rng));
            let a = SceneObject3D::new(record(), pa.clone()).unwrap();
            let b = SceneObject3D::new(record(), pb.clone()).unwrap();
            let got = assign_predicate(&a, &b, DEFAULT_MARGIN).map(|p| p.value);
            assert_eq!(got, oracle(&pa, &pb, DEFAULT_MARGIN));
            let back = assign_predicate(&b, &a, DEFAULT_MARGIN).map(|p| p.value);
            assert_eq!(back, got.map(|p| p.flipped()));
            emitted += usize::from(got.is_some());
        }
        assert!(emitted > 100 && emitted < 500);
    }

    #[test]
    fn nearest_by_centroid() {
        let objs = vec![object([0.0; 3], [0.1; 3]), object([5.0, 0.0, 0.0], [0.1; 3]), object([1.0, 0.0, 0.0], [0.1; 3])];
        assert_eq!(nearest_adjacent(&objs, 0), Some(2));
        assert_eq!(nearest_adjacent(&objs, 1), Some(2));
        assert_eq!(nearest_adjacent(&objs[..1], 0), None);
    }

    struct Failing;
    impl LabelExtractor for Failing {
        fn extract_label(&self, _: &str) -> Result<String> {
            Err(Error::Client {
                kind: "llm",
                message: "down".into(),
            })
        }
    }

    #[test]
    fn caption_labels() {
        assert_eq!(caption_to_label("person in blue shirt", &MockLlm).unwrap().label, "person");
        assert_eq!(caption_to_label("dark brown cow", &MockLlm).unwrap().label, "cow");
        let fb = caption_to_label("dark brown cow", &Failing).unwrap();
        assert_eq!(fb, LabelOutcome { label: "cow".into(), fallback: true });
        assert!(caption_to_label("", &MockLlm).is_err());
    }
}
