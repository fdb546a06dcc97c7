//! Map quality metrics against ground truth: average Hausdorff distance,
//! occupancy precision/recall/F1, average distance of movable objects,
//! semantic mIoU (2D and 3D) and instance mean-F1 (2D and 3D).
//!
//! Speculatively-occupied voxels never count as occupied for the occupancy
//! and distance metrics; their contribution is reported separately as a
//! speculation-recall statistic. Instance scoring covers movable ground-truth
//! instances (the objects of interest).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::Point3;

use crate::filter::LabeledVoxelMap;
use crate::frame::Image;
use crate::geometry::{CameraModel, Pose};
use crate::grid::InstanceId;
use crate::sim::GroundTruthMap;

/// Per-frame metric values. Distances are in meters; unset options mark
/// frames where the metric is undefined (empty sets).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMetrics {
    pub frame: u32,
    pub ahd: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub adm: Option<f64>,
    pub miou_2d: Option<f64>,
    pub miou_3d: Option<f64>,
    pub mf1_2d: Option<f64>,
    pub mf1_3d: Option<f64>,
    pub speculative_recall: f64,
    /// Per-class (label, IoU 2D, IoU 3D) for classes present in the ground
    /// truth; a `None` entry means the class was absent in that projection.
    pub per_class: Vec<(u32, Option<f64>, Option<f64>)>,
}

fn center(gv: [i64; 3], l: f64) -> Point3<f64> {
    Point3::new(
        (gv[0] as f64 + 0.5) * l,
        (gv[1] as f64 + 0.5) * l,
        (gv[2] as f64 + 0.5) * l,
    )
}

/// Distance from `from` to the nearest voxel center in `set`, searched over
/// expanding Chebyshev shells. Returns `None` for an empty set or when the
/// search exceeds `r_max` voxels.
fn nearest_center_dist(set: &BTreeSet<[i64; 3]>, from: [i64; 3], l: f64, r_max: i64) -> Option<f64> {
    if set.is_empty() {
        return None;
    }
    if set.contains(&from) {
        return Some(0.0);
    }
    let mut best = f64::INFINITY;
    for r in 1..=r_max {
        // Shell at Chebyshev radius r.
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let v = [from[0] + dx, from[1] + dy, from[2] + dz];
                    if set.contains(&v) {
                        let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt() * l;
                        best = best.min(d);
                    }
                }
            }
        }
        // Any voxel in a farther shell is at least r*l away.
        if best <= r as f64 * l {
            return Some(best);
        }
    }
    best.is_finite().then_some(best)
}

/// Average Hausdorff distance between two voxel-center sets: the symmetric
/// mean of directed mean nearest-neighbor distances. `None` when either set
/// is empty.
pub fn ahd(est: &BTreeSet<[i64; 3]>, gt: &BTreeSet<[i64; 3]>, l: f64) -> Option<f64> {
    if est.is_empty() || gt.is_empty() {
        return None;
    }
    let r_max = 1024;
    let dir = |from: &BTreeSet<[i64; 3]>, to: &BTreeSet<[i64; 3]>| -> f64 {
        let sum: f64 = from
            .iter()
            .map(|v| nearest_center_dist(to, *v, l, r_max).unwrap_or(f64::INFINITY))
            .sum();
        sum / from.len() as f64
    };
    Some((dir(est, gt) + dir(gt, est)) / 2.0)
}

/// Mean distance from movable ground-truth voxels to the nearest estimated
/// occupied voxel. With no movable voxels the metric is undefined; with an
/// empty estimate the map diagonal is reported as the worst case.
pub fn adm(
    gt_movable: &BTreeSet<[i64; 3]>,
    est: &BTreeSet<[i64; 3]>,
    l: f64,
    map_diagonal: f64,
) -> Option<f64> {
    if gt_movable.is_empty() {
        return None;
    }
    if est.is_empty() {
        return Some(map_diagonal);
    }
    let sum: f64 = gt_movable
        .iter()
        .map(|v| nearest_center_dist(est, *v, l, 1024).unwrap_or(map_diagonal))
        .sum();
    Some(sum / gt_movable.len() as f64)
}

fn f1_of(tp: usize, est_total: usize, gt_total: usize) -> (f64, f64, f64) {
    let precision = if est_total == 0 {
        0.0
    } else {
        tp as f64 / est_total as f64
    };
    let recall = if gt_total == 0 {
        0.0
    } else {
        tp as f64 / gt_total as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Option<f64> {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Greedy one-to-one matching by descending IoU with a strict 0.5 gate;
/// matched pairs score element-level F1, unmatched ground-truth instances
/// score 0. Returns the mean over ground-truth instances.
pub fn instance_mf1<T: Ord + Copy>(
    est: &BTreeMap<InstanceId, BTreeSet<T>>,
    gt: &BTreeMap<InstanceId, BTreeSet<T>>,
) -> Option<f64> {
    if gt.is_empty() {
        return None;
    }
    let mut pairs: Vec<(f64, InstanceId, InstanceId)> = Vec::new();
    for (gi, gset) in gt {
        for (ei, eset) in est {
            if let Some(x) = iou(eset, gset) {
                if x > 0.5 {
                    pairs.push((x, *gi, *ei));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_gt = BTreeSet::new();
    let mut used_est = BTreeSet::new();
    let mut total = 0.0;
    for (_, gi, ei) in pairs {
        if used_gt.contains(&gi) || used_est.contains(&ei) {
            continue;
        }
        used_gt.insert(gi);
        used_est.insert(ei);
        let gset = &gt[&gi];
        let eset = &est[&ei];
        let tp = gset.intersection(eset).count();
        let (_, _, f1) = f1_of(tp, eset.len(), gset.len());
        total += f1;
    }
    Some(total / gt.len() as f64)
}

/// Z-buffered nearest-pixel splat of labeled voxels: each voxel center
/// projects to one pixel, nearest depth wins. Returns (semantic, instance)
/// label images (0 = empty).
pub fn splat_labels(
    voxels: &[([i64; 3], u32, InstanceId)],
    l: f64,
    cam: &CameraModel,
    pose: &Pose,
) -> (Image<u32>, Image<u32>) {
    let map_to_cam = pose.map_to_cam();
    let mut zbuf = Image::<f32>::filled(cam.width, cam.height, f32::INFINITY);
    let mut sem = Image::<u32>::filled(cam.width, cam.height, 0);
    let mut inst = Image::<u32>::filled(cam.width, cam.height, 0);
    for (gv, label, id) in voxels {
        let c = map_to_cam.apply(&center(*gv, l));
        if let Some((u, v)) = cam.project(&c) {
            let (pu, pv) = (u.floor() as u32, v.floor() as u32);
            if (c.z as f32) < zbuf.at(pu, pv) {
                zbuf.set(pu, pv, c.z as f32);
                sem.set(pu, pv, *label);
                inst.set(pu, pv, *id);
            }
        }
    }
    (sem, inst)
}

fn class_sets_3d(
    voxels: impl Iterator<Item = ([i64; 3], u32)>,
) -> BTreeMap<u32, BTreeSet<[i64; 3]>> {
    let mut out: BTreeMap<u32, BTreeSet<[i64; 3]>> = BTreeMap::new();
    for (gv, label) in voxels {
        out.entry(label).or_default().insert(gv);
    }
    out
}

fn class_sets_2d(img: &Image<u32>) -> BTreeMap<u32, BTreeSet<usize>> {
    let mut out: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (i, &label) in img.data.iter().enumerate() {
        if label != 0 {
            out.entry(label).or_default().insert(i);
        }
    }
    out
}

/// Evaluates one frame. `view` supplies the camera and pose for the 2D
/// projected metrics; without it only 3D metrics are produced.
pub fn evaluate_frame(
    est: &LabeledVoxelMap,
    gt: &GroundTruthMap,
    view: Option<(&CameraModel, &Pose)>,
    frame: u32,
) -> FrameMetrics {
    let l = gt.l_voxel;
    let est_occ: BTreeSet<[i64; 3]> = est.occupied().map(|(v, _)| *v).collect();
    let gt_occ: BTreeSet<[i64; 3]> = gt.voxels.keys().copied().collect();
    let tp = est_occ.intersection(&gt_occ).count();
    let (precision, recall, f1) = f1_of(tp, est_occ.len(), gt_occ.len());

    let gt_movable: BTreeSet<[i64; 3]> = gt
        .voxels
        .iter()
        .filter(|(_, v)| v.movable)
        .map(|(v, _)| *v)
        .collect();

    let spec_set: BTreeSet<[i64; 3]> = est.speculative().map(|(v, _)| *v).collect();
    let speculative_recall = if gt_occ.is_empty() {
        0.0
    } else {
        spec_set.intersection(&gt_occ).count() as f64 / gt_occ.len() as f64
    };

    // 3D semantic IoU over classes present in the ground truth.
    let est_classes =
        class_sets_3d(est.occupied().map(|(v, l)| (*v, l.semantic_label)));
    let gt_classes = class_sets_3d(gt.voxels.iter().map(|(v, x)| (*v, x.semantic_label)));
    let empty = BTreeSet::new();
    let mut per_class: Vec<(u32, Option<f64>, Option<f64>)> = Vec::new();
    let mut miou_3d_sum = 0.0;
    for (label, gset) in &gt_classes {
        let eset = est_classes.get(label).unwrap_or(&empty);
        let x = iou(eset, gset).unwrap_or(0.0);
        miou_3d_sum += x;
        per_class.push((*label, None, Some(x)));
    }
    let miou_3d = (!gt_classes.is_empty()).then(|| miou_3d_sum / gt_classes.len() as f64);

    // 3D instance mean F1 over movable ground-truth instances.
    let est_instances: BTreeMap<InstanceId, BTreeSet<[i64; 3]>> = {
        let mut out: BTreeMap<InstanceId, BTreeSet<[i64; 3]>> = BTreeMap::new();
        for (v, lab) in est.occupied() {
            out.entry(lab.instance_id).or_default().insert(*v);
        }
        out
    };
    let gt_instances: BTreeMap<InstanceId, BTreeSet<[i64; 3]>> = {
        let mut out: BTreeMap<InstanceId, BTreeSet<[i64; 3]>> = BTreeMap::new();
        for (v, x) in &gt.voxels {
            if x.movable {
                out.entry(x.instance_id).or_default().insert(*v);
            }
        }
        out
    };
    let mf1_3d = instance_mf1(&est_instances, &gt_instances);

    // 2D metrics via z-buffered splats of both maps.
    let (miou_2d, mf1_2d) = if let Some((cam, pose)) = view {
        let est_voxels: Vec<([i64; 3], u32, InstanceId)> = est
            .occupied()
            .map(|(v, lab)| (*v, lab.semantic_label, lab.instance_id))
            .collect();
        let gt_voxels: Vec<([i64; 3], u32, InstanceId)> = gt
            .voxels
            .iter()
            .map(|(v, x)| (*v, x.semantic_label, x.instance_id))
            .collect();
        let (est_sem, est_inst) = splat_labels(&est_voxels, l, cam, pose);
        let (gt_sem, gt_inst) = splat_labels(&gt_voxels, l, cam, pose);
        let est_c2 = class_sets_2d(&est_sem);
        let gt_c2 = class_sets_2d(&gt_sem);
        let empty2 = BTreeSet::new();
        let mut sum = 0.0;
        for (label, gset) in &gt_c2 {
            let eset = est_c2.get(label).unwrap_or(&empty2);
            let x = iou(eset, gset).unwrap_or(0.0);
            sum += x;
            if let Some(entry) = per_class.iter_mut().find(|e| e.0 == *label) {
                entry.1 = Some(x);
            } else {
                per_class.push((*label, Some(x), None));
            }
        }
        let miou_2d = (!gt_c2.is_empty()).then(|| sum / gt_c2.len() as f64);

        let movable_ids: BTreeSet<InstanceId> = gt_instances.keys().copied().collect();
        let mut est_i2: BTreeMap<InstanceId, BTreeSet<usize>> = BTreeMap::new();
        for (i, &id) in est_inst.data.iter().enumerate() {
            if id != 0 {
                est_i2.entry(id).or_default().insert(i);
            }
        }
        let mut gt_i2: BTreeMap<InstanceId, BTreeSet<usize>> = BTreeMap::new();
        for (i, &id) in gt_inst.data.iter().enumerate() {
            if id != 0 && movable_ids.contains(&id) {
                gt_i2.entry(id).or_default().insert(i);
            }
        }
        (miou_2d, instance_mf1(&est_i2, &gt_i2))
    } else {
        (None, None)
    };

    FrameMetrics {
        frame,
        ahd: ahd(&est_occ, &gt_occ, l),
        precision,
        recall,
        f1,
        adm: adm(&gt_movable, &est_occ, l, map_diagonal(est, gt)),
        miou_2d,
        miou_3d,
        mf1_2d,
        mf1_3d,
        speculative_recall,
        per_class,
    }
}

fn map_diagonal(est: &LabeledVoxelMap, gt: &GroundTruthMap) -> f64 {
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for v in est
        .voxels
        .iter()
        .map(|(v, _)| v)
        .chain(gt.voxels.keys())
    {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    if lo[0] > hi[0] {
        return 0.0;
    }
    let l = gt.l_voxel;
    (0..3)
        .map(|a| (((hi[a] - lo[a] + 1) as f64) * l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean over frames, skipping undefined values per metric.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    frames: usize,
    sums: [f64; 9],
    counts: [usize; 9],
}

impl MetricsAccumulator {
    pub fn push(&mut self, m: &FrameMetrics) {
        self.frames += 1;
        let fields = [
            m.ahd,
            Some(m.precision),
            Some(m.recall),
            Some(m.f1),
            m.adm,
            m.miou_2d,
            m.miou_3d,
            m.mf1_2d,
            m.mf1_3d,
        ];
        for (i, f) in fields.iter().enumerate() {
            if let Some(x) = f {
                self.sums[i] += x;
                self.counts[i] += 1;
            }
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn means(&self) -> [Option<f64>; 9] {
        let mut out = [None; 9];
        for i in 0..9 {
            if self.counts[i] > 0 {
                out[i] = Some(self.sums[i] / self.counts[i] as f64);
            }
        }
        out
    }
}

pub const METRICS_CSV_HEADER: &str =
    "frame,ahd,precision,recall,f1,adm,miou_2d,miou_3d,mf1_2d,mf1_3d,speculative_recall";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

/// Writes the per-frame table plus one `mean` aggregate row.
pub fn write_metrics_csv<W: Write>(
    rows: &[FrameMetrics],
    w: &mut W,
) -> Result<(), std::io::Error> {
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    let mut acc = MetricsAccumulator::default();
    let mut spec_sum = 0.0;
    for m in rows {
        acc.push(m);
        spec_sum += m.speculative_recall;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.frame,
            fmt_opt(m.ahd),
            fmt_opt(Some(m.precision)),
            fmt_opt(Some(m.recall)),
            fmt_opt(Some(m.f1)),
            fmt_opt(m.adm),
            fmt_opt(m.miou_2d),
            fmt_opt(m.miou_3d),
            fmt_opt(m.mf1_2d),
            fmt_opt(m.mf1_3d),
            fmt_opt(Some(m.speculative_recall)),
        )?;
    }
    if !rows.is_empty() {
        let means = acc.means();
        writeln!(
            w,
            "mean,{},{},{},{},{},{},{},{},{},{}",
            fmt_opt(means[0]),
            fmt_opt(means[1]),
            fmt_opt(means[2]),
            fmt_opt(means[3]),
            fmt_opt(means[4]),
            fmt_opt(means[5]),
            fmt_opt(means[6]),
            fmt_opt(means[7]),
            fmt_opt(means[8]),
            fmt_opt(Some(spec_sum / rows.len() as f64)),
        )?;
    }
    Ok(())
}

/// Per-class CSV: `frame,class,iou_2d,iou_3d`.
pub fn write_per_class_csv<W: Write>(
    rows: &[FrameMetrics],
    w: &mut W,
) -> Result<(), std::io::Error> {
    writeln!(w, "frame,class,iou_2d,iou_3d")?;
    for m in rows {
        for (label, i2, i3) in &m.per_class {
            writeln!(w, "{},{},{},{}", m.frame, label, fmt_opt(*i2), fmt_opt(*i3))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{VoxelLabel, VoxelStatus};
    use crate::geometry::RigidTransform;
    use crate::sim::GtVoxel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(vs: &[[i64; 3]]) -> BTreeSet<[i64; 3]> {
        vs.iter().copied().collect()
    }

    #[test]
    fn ahd_identical_sets_is_zero() {
        let a = set(&[[0, 0, 0], [1, 2, 3]]);
        assert_eq!(ahd(&a, &a, 0.2), Some(0.0));
    }

    #[test]
    fn ahd_singletons_one_voxel_apart() {
        let a = set(&[[0, 0, 0]]);
        let b = set(&[[1, 0, 0]]);
        assert!((ahd(&a, &b, 0.2).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ahd_empty_is_undefined() {
        let a = set(&[[0, 0, 0]]);
        assert_eq!(ahd(&a, &BTreeSet::new(), 0.2), None);
        assert_eq!(ahd(&BTreeSet::new(), &a, 0.2), None);
    }

    fn bruteforce_nn(from: &[[i64; 3]], to: &[[i64; 3]], l: f64) -> f64 {
        let sum: f64 = from
            .iter()
            .map(|a| {
                to.iter()
                    .map(|b| {
                        let d = [
                            (a[0] - b[0]) as f64,
                            (a[1] - b[1]) as f64,
                            (a[2] - b[2]) as f64,
                        ];
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() * l
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        sum / from.len() as f64
    }

    #[test]
    fn ahd_and_adm_match_bruteforce_oracle_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let rand_set = |rng: &mut ChaCha8Rng, n: usize| -> Vec<[i64; 3]> {
                (0..n)
                    .map(|_| {
                        [
                            rng.gen_range(-6..6),
                            rng.gen_range(-6..6),
                            rng.gen_range(-6..6),
                        ]
                    })
                    .collect()
            };
            let a_v = rand_set(&mut rng, 12);
            let b_v = rand_set(&mut rng, 9);
            let a = set(&a_v);
            let b = set(&b_v);
            let av: Vec<[i64; 3]> = a.iter().copied().collect();
            let bv: Vec<[i64; 3]> = b.iter().copied().collect();
            let l = 0.25;
            let expect = (bruteforce_nn(&av, &bv, l) + bruteforce_nn(&bv, &av, l)) / 2.0;
            let got = ahd(&a, &b, l).unwrap();
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            let expect_adm = bruteforce_nn(&av, &bv, l);
            let got_adm = adm(&a, &b, l, 99.0).unwrap();
            assert!((got_adm - expect_adm).abs() < 1e-12);
        }
    }

    #[test]
    fn adm_cases() {
        let gt = set(&[[0, 0, 0], [1, 0, 0]]);
        // Perfect overlap.
        assert_eq!(adm(&gt, &gt, 0.2, 9.0), Some(0.0));
        // Object missed entirely, nearest est voxel 5 voxels away (1.0 m).
        let est = set(&[[5, 0, 0], [6, 0, 0]]);
        let d = adm(&set(&[[0, 0, 0]]), &est, 0.2, 9.0).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        // Empty estimate reports the worst case.
        assert_eq!(adm(&gt, &BTreeSet::new(), 0.2, 9.0), Some(9.0));
        // No movable voxels: undefined.
        assert_eq!(adm(&BTreeSet::new(), &gt, 0.2, 9.0), None);
    }

    fn toy_maps() -> (LabeledVoxelMap, GroundTruthMap) {
        let lab = |status, id, sem| VoxelLabel {
            status,
            instance_id: id,
            semantic_label: sem,
            weight: 1.0,
        };
        let est = LabeledVoxelMap {
            l_voxel: 0.2,
            voxels: vec![
                ([0, 0, 10], lab(VoxelStatus::Occupied, 3, 1)),
                ([1, 0, 10], lab(VoxelStatus::Occupied, 3, 1)),
                ([2, 0, 10], lab(VoxelStatus::Occupied, 4, 2)),
                ([5, 0, 10], lab(VoxelStatus::Speculative, 4, 2)),
            ],
        };
        let mut gt_voxels = BTreeMap::new();
        for (v, id, sem, movable) in [
            ([0, 0, 10], 3, 1, true),
            ([1, 0, 10], 3, 1, true),
            ([2, 0, 10], 4, 2, true),
            ([3, 0, 10], 4, 2, true),
        ] {
            gt_voxels.insert(
                v,
                GtVoxel {
                    instance_id: id,
                    semantic_label: sem,
                    movable,
                },
            );
        }
        (
            est,
            GroundTruthMap {
                l_voxel: 0.2,
                voxels: gt_voxels,
            },
        )
    }

    #[test]
    fn evaluate_frame_hand_counted_toy() {
        let (est, gt) = toy_maps();
        let m = evaluate_frame(&est, &gt, None, 0);
        // Occupied: est {0,1,2}, gt {0,1,2,3}; tp = 3.
        assert!((m.precision - 1.0).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);
        assert!((m.f1 - 2.0 * 0.75 / 1.75).abs() < 1e-12);
        // Class 1: est {0,1} gt {0,1} -> 1. Class 2: est {2} gt {2,3} -> 0.5.
        assert!((m.miou_3d.unwrap() - 0.75).abs() < 1e-12);
        // Instance 3: IoU 1 -> F1 1. Instance 4: IoU 0.5 -> gate (>0.5) fails -> 0.
        assert!((m.mf1_3d.unwrap() - 0.5).abs() < 1e-12);
        // Speculative voxel [5,0,10] is not in GT: zero speculation recall,
        // and it must not count as occupied anywhere.
        assert_eq!(m.speculative_recall, 0.0);
        // ADm: gt movable {0,1,2,3} distances to est {0,1,2}: 0,0,0,0.2.
        assert!((m.adm.unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn perfect_map_scores_ones() {
        let (_, gt) = toy_maps();
        let est = LabeledVoxelMap {
            l_voxel: 0.2,
            voxels: gt
                .voxels
                .iter()
                .map(|(v, x)| {
                    (
                        *v,
                        VoxelLabel {
                            status: VoxelStatus::Occupied,
                            instance_id: x.instance_id,
                            semantic_label: x.semantic_label,
                            weight: 1.0,
                        },
                    )
                })
                .collect(),
        };
        let cam = CameraModel::new(100.0, 40.0, 30.0, 80, 60, 50.0).unwrap();
        let pose = Pose::new(RigidTransform::identity(), 0);
        let m = evaluate_frame(&est, &gt, Some((&cam, &pose)), 0);
        assert_eq!(m.ahd, Some(0.0));
        assert_eq!(m.f1, 1.0);
        assert_eq!(m.miou_3d, Some(1.0));
        assert_eq!(m.mf1_3d, Some(1.0));
        assert_eq!(m.miou_2d, Some(1.0));
        assert_eq!(m.mf1_2d, Some(1.0));
        assert_eq!(m.adm, Some(0.0));
    }

    #[test]
    fn background_only_estimate_scores_zero_iou_for_foreground() {
        let (_, gt) = toy_maps();
        let est = LabeledVoxelMap {
            l_voxel: 0.2,
            voxels: gt
                .voxels
                .keys()
                .map(|v| {
                    (
                        *v,
                        VoxelLabel {
                            status: VoxelStatus::Occupied,
                            instance_id: 99,
                            semantic_label: 0,
                            weight: 1.0,
                        },
                    )
                })
                .collect(),
        };
        let m = evaluate_frame(&est, &gt, None, 0);
        assert_eq!(m.miou_3d, Some(0.0));
        for (_, _, i3) in &m.per_class {
            assert_eq!(*i3, Some(0.0));
        }
    }

    #[test]
    fn instance_matching_gate_and_greedy_vs_bruteforce() {
        // Two GT instances, two est instances; greedy matches the best pair
        // first. Brute-force over both assignments agrees at this size.
        let mk = |vs: &[[i64; 3]]| -> BTreeSet<[i64; 3]> { vs.iter().copied().collect() };
        let mut gt = BTreeMap::new();
        gt.insert(1, mk(&[[0, 0, 0], [1, 0, 0], [2, 0, 0]]));
        gt.insert(2, mk(&[[10, 0, 0], [11, 0, 0]]));
        let mut est = BTreeMap::new();
        est.insert(7, mk(&[[0, 0, 0], [1, 0, 0], [2, 0, 0]])); // IoU 1 with gt 1
        est.insert(8, mk(&[[10, 0, 0], [12, 0, 0]])); // IoU 1/3 with gt 2 -> gated
        let got = instance_mf1(&est, &gt).unwrap();
        // gt1 matched perfectly (F1 1), gt2 unmatched (0): mean 0.5.
        assert!((got - 0.5).abs() < 1e-12);

        // Brute force: best one-to-one assignment with the same gate.
        let mut best = 0.0f64;
        for perm in [[(1, 7), (2, 8)], [(1, 8), (2, 7)]] {
            let mut total = 0.0;
            for (g, e) in perm {
                let gset = &gt[&g];
                let eset = &est[&e];
                if iou(eset, gset).unwrap_or(0.0) > 0.5 {
                    let tp = gset.intersection(eset).count();
                    total += f1_of(tp, eset.len(), gset.len()).2;
                }
            }
            best = best.max(total / gt.len() as f64);
        }
        assert!((got - best).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let (est, gt) = toy_maps();
        let mut est_rev = est.clone();
        est_rev.voxels.reverse();
        let a = evaluate_frame(&est, &gt, None, 0);
        let b = evaluate_frame(&est_rev, &gt, None, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn streaming_mean_matches_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut rows = Vec::new();
        for frame in 0..50 {
            rows.push(FrameMetrics {
                frame,
                ahd: (frame % 3 != 0).then(|| rng.gen::<f64>()),
                precision: rng.gen(),
                recall: rng.gen(),
                f1: rng.gen(),
                adm: (frame % 5 != 0).then(|| rng.gen::<f64>()),
                miou_2d: Some(rng.gen()),
                miou_3d: Some(rng.gen()),
                mf1_2d: None,
                mf1_3d: Some(rng.gen()),
                speculative_recall: rng.gen(),
                per_class: vec![],
            });
        }
        let mut acc = MetricsAccumulator::default();
        for m in &rows {
            acc.push(m);
        }
        let streaming = acc.means();
        // Batch recomputation.
        let batch = |f: &dyn Fn(&FrameMetrics) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = rows.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let fields: [&dyn Fn(&FrameMetrics) -> Option<f64>; 9] = [
            &|m| m.ahd,
            &|m| Some(m.precision),
            &|m| Some(m.recall),
            &|m| Some(m.f1),
            &|m| m.adm,
            &|m| m.miou_2d,
            &|m| m.miou_3d,
            &|m| m.mf1_2d,
            &|m| m.mf1_3d,
        ];
        for (i, f) in fields.iter().enumerate() {
            match (streaming[i], batch(f)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                other => panic!("mismatch {other:?}"),
            }
        }
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(METRICS_CSV_HEADER));
        assert_eq!(text.lines().count(), 52); // header + 50 rows + mean
    }
}
