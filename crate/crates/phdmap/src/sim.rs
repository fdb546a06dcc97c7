//! Synthetic scene simulator: renders depth and instance-ID frames from
//! analytic rigid scenes, injects sensor and segmentation/tracking noise, and
//! accumulates per-step ground-truth labeled voxel maps.
//!
//! Map frame convention matches the camera at identity pose: x right, y down,
//! z forward. An identity-pose camera at the origin looks along +z, and the
//! ground plane of the demo scenes sits at positive y.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{DepthImage, IdImage, Image, InstanceObservation, MeasurementFrame};
use crate::geometry::{CameraModel, Pose, RigidTransform};
use crate::grid::{InstanceId, UNLABELED};
use crate::rng::{derive, Stream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene file parse error: {0}")]
    Parse(String),
    #[error("scene has no camera keyframes")]
    NoCamera,
    #[error("object {0} has no keyframes")]
    NoKeyframes(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Analytic rigid shape in its local frame.
#[derive(Debug, Clone)]
pub enum Shape {
    /// Axis-aligned box centered at the origin with the given half extents.
    Box { half: Vector3<f64> },
    Sphere { radius: f64 },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
    /// Triangle soup; must be watertight for ground-truth voxelization of
    /// enclosed space to make sense (only the surface is used here).
    Mesh { triangles: Vec<[Point3<f64>; 3]> },
}

impl Shape {
    /// Nearest positive ray parameter along `dir` from `origin`, both in the
    /// shape's local frame. `dir` need not be normalized.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Shape::Box { half } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if dir[a].abs() < 1e-300 {
                        if origin[a].abs() > half[a] {
                            return None;
                        }
                    } else {
                        let ta = (-half[a] - origin[a]) / dir[a];
                        let tb = (half[a] - origin[a]) / dir[a];
                        let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
                        t0 = t0.max(ta);
                        t1 = t1.min(tb);
                        if t0 > t1 {
                            return None;
                        }
                    }
                }
                smallest_positive(t0, t1)
            }
            Shape::Sphere { radius } => {
                let a = dir.norm_squared();
                let b = origin.coords.dot(dir);
                let c = origin.coords.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                smallest_positive((-b - sq) / a, (-b + sq) / a)
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let mut best: Option<f64> = None;
                // Side surface.
                let a = dir.x * dir.x + dir.y * dir.y;
                if a > 1e-300 {
                    let b = origin.x * dir.x + origin.y * dir.y;
                    let c = origin.x * origin.x + origin.y * origin.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            if t > 0.0 && (origin.z + t * dir.z).abs() <= *half_height {
                                best = Some(best.map_or(t, |b: f64| b.min(t)));
                            }
                        }
                    }
                }
                // Caps.
                if dir.z.abs() > 1e-300 {
                    for cap in [-*half_height, *half_height] {
                        let t = (cap - origin.z) / dir.z;
                        if t > 0.0 {
                            let x = origin.x + t * dir.x;
                            let y = origin.y + t * dir.y;
                            if x * x + y * y <= radius * radius {
                                best = Some(best.map_or(t, |b: f64| b.min(t)));
                            }
                        }
                    }
                }
                best
            }
            Shape::Mesh { triangles } => {
                let mut best: Option<f64> = None;
                for tri in triangles {
                    if let Some(t) = moller_trumbore(origin, dir, tri) {
                        best = Some(best.map_or(t, |b: f64| b.min(t)));
                    }
                }
                best
            }
        }
    }
}

fn smallest_positive(t0: f64, t1: f64) -> Option<f64> {
    if t0 > 0.0 {
        Some(t0)
    } else if t1 > 0.0 {
        Some(t1)
    } else {
        None
    }
}

fn moller_trumbore(origin: &Point3<f64>, dir: &Vector3<f64>, tri: &[Point3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 0.0).then_some(t)
}

/// Keyframed rigid trajectory with linear interpolation (slerp on rotation).
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// (step, rotation, translation), sorted by step.
    keyframes: Vec<(u32, UnitQuaternion<f64>, Vector3<f64>)>,
}

impl Trajectory {
    pub fn new(mut keyframes: Vec<(u32, UnitQuaternion<f64>, Vector3<f64>)>) -> Self {
        keyframes.sort_by_key(|k| k.0);
        assert!(!keyframes.is_empty());
        Self { keyframes }
    }

    pub fn fixed(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(vec![(0, rotation, translation)])
    }

    pub fn pose_at(&self, step: u32) -> RigidTransform {
        let kf = &self.keyframes;
        if step <= kf[0].0 {
            return RigidTransform::from_rotation(&kf[0].1, kf[0].2);
        }
        if step >= kf[kf.len() - 1].0 {
            let last = &kf[kf.len() - 1];
            return RigidTransform::from_rotation(&last.1, last.2);
        }
        let hi = kf.partition_point(|k| k.0 <= step);
        let (s0, q0, t0) = &kf[hi - 1];
        let (s1, q1, t1) = &kf[hi];
        let alpha = (step - s0) as f64 / (s1 - s0) as f64;
        let q = q0.slerp(q1, alpha);
        let t = t0 + (t1 - t0) * alpha;
        RigidTransform::from_rotation(&q, t)
    }
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub instance_id: InstanceId,
    pub label: String,
    pub movable: bool,
    pub shape: Shape,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub camera_track: Trajectory,
}

impl Scene {
    pub fn camera_pose_at(&self, step: u32) -> Pose {
        Pose::new(self.camera_track.pose_at(step), step)
    }

    /// Deterministic label table: names sorted, IDs from 1 (0 = unlabeled).
    pub fn label_table(&self) -> BTreeMap<String, u32> {
        let mut names: Vec<&str> = self.objects.iter().map(|o| o.label.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i as u32 + 1))
            .collect()
    }
}

/// Scheduled permanent re-identification of an instance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct IdSwitch {
    pub step: u32,
    pub from: InstanceId,
    pub to: InstanceId,
}

/// Sensor and preprocessing noise model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Depth noise deviation: sigma_d(d) = depth_a * d + depth_b.
    pub depth_a: f64,
    pub depth_b: f64,
    /// Probability a movable instance is relabeled with a fresh ID for one
    /// frame.
    pub mislabel_prob: f64,
    /// Probability a movable instance's pixels are dropped to background for
    /// one frame.
    pub missed_prob: f64,
    /// Deviation of the additive translation noise on estimated transforms.
    pub transform_sigma_t: f64,
    /// Deviation (radians) of the rotation perturbation on estimated
    /// transforms.
    pub transform_sigma_r: f64,
    pub id_switches: Vec<IdSwitch>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            depth_a: 0.0,
            depth_b: 0.0,
            mislabel_prob: 0.0,
            missed_prob: 0.0,
            transform_sigma_t: 0.0,
            transform_sigma_r: 0.0,
            id_switches: Vec::new(),
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        for (p, name) in [
            (self.mislabel_prob, "mislabel_prob"),
            (self.missed_prob, "missed_prob"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Parse(format!("{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Reported instance ID after applying all switches scheduled at or
    /// before `step`.
    pub fn reported_id(&self, base: InstanceId, step: u32) -> InstanceId {
        let mut id = base;
        let mut switches = self.id_switches.clone();
        switches.sort_by_key(|s| s.step);
        for sw in switches {
            if sw.step <= step && id == sw.from {
                id = sw.to;
            }
        }
        id
    }
}

/// Noiseless geometry render: per-pixel depth and object index.
pub fn render_geometry(
    scene: &Scene,
    cam: &CameraModel,
    step: u32,
) -> (Pose, DepthImage, Image<u32>) {
    let pose = scene.camera_pose_at(step);
    let origin = pose.position();
    let rot = *pose.cam_to_map.rotation();
    let mut depth = DepthImage::filled(cam.width, cam.height, f32::INFINITY);
    let mut obj = Image::<u32>::filled(cam.width, cam.height, u32::MAX);

    let locals: Vec<(RigidTransform, Matrix3<f64>)> = scene
        .objects
        .iter()
        .map(|o| {
            let t = o.trajectory.pose_at(step);
            let inv = t.inverse();
            (inv, *inv.rotation())
        })
        .collect();

    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir_pix = cam.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
            let dir_world = rot * dir_pix;
            let mut best = f64::INFINITY;
            let mut best_obj = u32::MAX;
            for (i, (inv, inv_rot)) in locals.iter().enumerate() {
                let lo = inv.apply(&origin);
                let ld = inv_rot * dir_world;
                if let Some(t) = scene.objects[i].shape.intersect(&lo, &ld) {
                    if t < best && t <= cam.max_range {
                        best = t;
                        best_obj = i as u32;
                    }
                }
            }
            if best_obj != u32::MAX {
                depth.set(u, v, best as f32);
                obj.set(u, v, best_obj);
            }
        }
    }
    (pose, depth, obj)
}

/// Streaming simulator: renders measurement frames in step order, applying
/// the noise model. Tracking continuity (whether a transform is attached to
/// an instance) follows the reported IDs of the previous rendered frame.
#[derive(Debug)]
pub struct Simulator {
    pub scene: Scene,
    pub cam: CameraModel,
    pub noise: NoiseSpec,
    pub seed: u64,
    labels: BTreeMap<String, u32>,
    /// Reported ID per object index in the previously rendered frame.
    prev_reported: BTreeMap<usize, InstanceId>,
    fresh_id_counter: u32,
}

/// Base for transient fresh IDs produced by mislabel noise.
pub const MISLABEL_ID_BASE: InstanceId = 1_000_000;

impl Simulator {
    pub fn new(scene: Scene, cam: CameraModel, noise: NoiseSpec, seed: u64) -> Self {
        let labels = scene.label_table();
        Self {
            scene,
            cam,
            noise,
            seed,
            labels,
            prev_reported: BTreeMap::new(),
            fresh_id_counter: 0,
        }
    }

    pub fn label_table(&self) -> &BTreeMap<String, u32> {
        &self.labels
    }

    pub fn label_id(&self, name: &str) -> u32 {
        *self.labels.get(name).unwrap_or(&0)
    }

    /// Renders the measurement frame for `step`. Call in increasing step
    /// order; tracking continuity spans consecutive calls.
    pub fn frame(&mut self, step: u32) -> MeasurementFrame {
        let mut rng = derive(self.seed, Stream::Render, step as u64);
        let (pose, mut depth, obj) = render_geometry(&self.scene, &self.cam, step);

        // Per-instance noise decisions first (fixed draw order).
        #[derive(Clone, Copy, PartialEq)]
        enum IdFate {
            Normal,
            Missed,
            Fresh(InstanceId),
        }
        let mut fates = vec![IdFate::Normal; self.scene.objects.len()];
        for (i, o) in self.scene.objects.iter().enumerate() {
            if !o.movable {
                continue;
            }
            let miss: f64 = rng.gen();
            let mislabel: f64 = rng.gen();
            if miss < self.noise.missed_prob {
                fates[i] = IdFate::Missed;
            } else if mislabel < self.noise.mislabel_prob {
                self.fresh_id_counter += 1;
                fates[i] = IdFate::Fresh(MISLABEL_ID_BASE + self.fresh_id_counter);
            }
        }

        // Reported ID per object this frame.
        let reported: Vec<InstanceId> = self
            .scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| match fates[i] {
                IdFate::Missed => UNLABELED,
                IdFate::Fresh(id) => id,
                IdFate::Normal => self.noise.reported_id(o.instance_id, step),
            })
            .collect();

        // Instance-ID image and depth noise.
        let mut ids = IdImage::filled(self.cam.width, self.cam.height, UNLABELED);
        let mut visible = vec![false; self.scene.objects.len()];
        for p in 0..obj.data.len() {
            let o = obj.data[p];
            if o != u32::MAX {
                visible[o as usize] = true;
                ids.data[p] = reported[o as usize];
            }
        }
        if self.noise.depth_a != 0.0 || self.noise.depth_b != 0.0 {
            for d in depth.data.iter_mut() {
                if d.is_finite() {
                    let sigma = self.noise.depth_a * *d as f64 + self.noise.depth_b;
                    if sigma > 0.0 {
                        let n = Normal::new(0.0, sigma).unwrap();
                        *d = (*d as f64 + n.sample(&mut rng)).max(0.01) as f32;
                    }
                }
            }
        }

        // Per-instance observations with (possibly noisy) relative transforms.
        let mut instances = Vec::new();
        let mut new_prev = BTreeMap::new();
        for (i, o) in self.scene.objects.iter().enumerate() {
            if !visible[i] || reported[i] == UNLABELED {
                continue;
            }
            new_prev.insert(i, reported[i]);
            let tracked = self.prev_reported.get(&i) == Some(&reported[i]) && step > 0;
            let transform = if o.movable && tracked {
                let t_now = o.trajectory.pose_at(step);
                let t_prev = o.trajectory.pose_at(step - 1);
                let mut t = t_now.compose(&t_prev.inverse());
                if self.noise.transform_sigma_t > 0.0 || self.noise.transform_sigma_r > 0.0 {
                    t = perturb_transform(
                        &t,
                        self.noise.transform_sigma_t,
                        self.noise.transform_sigma_r,
                        &mut rng,
                    );
                }
                Some(t)
            } else {
                None
            };
            instances.push(InstanceObservation {
                instance_id: reported[i],
                semantic_label: self.label_id(&o.label),
                movable: o.movable,
                transform,
            });
        }
        self.prev_reported = new_prev;

        MeasurementFrame {
            step,
            pose,
            depth,
            ids,
            instances,
        }
    }
}

fn perturb_transform(
    t: &RigidTransform,
    sigma_t: f64,
    sigma_r: f64,
    rng: &mut impl Rng,
) -> RigidTransform {
    let nt = Normal::new(0.0, sigma_t.max(1e-300)).unwrap();
    let nr = Normal::new(0.0, sigma_r.max(1e-300)).unwrap();
    let dt = Vector3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
    let axis = Vector3::new(nr.sample(rng), nr.sample(rng), nr.sample(rng));
    let dq = UnitQuaternion::from_scaled_axis(axis);
    let dr = RigidTransform::from_rotation(&dq, dt);
    dr.compose(t)
}

/// Per-step ground-truth labeled voxel map within the local window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthMap {
    pub l_voxel: f64,
    pub voxels: BTreeMap<[i64; 3], GtVoxel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtVoxel {
    pub instance_id: InstanceId,
    pub semantic_label: u32,
    pub movable: bool,
}

impl GroundTruthMap {
    pub fn occupied_set(&self) -> Vec<[i64; 3]> {
        self.voxels.keys().copied().collect()
    }

    pub fn write_text<W: std::io::Write>(&self, w: &mut W) -> Result<(), std::io::Error> {
        writeln!(w, "# phdmap-gt v1")?;
        writeln!(w, "# voxel {}", self.l_voxel)?;
        writeln!(w, "# columns: x y z instance_id semantic_label movable")?;
        for (gv, vx) in &self.voxels {
            writeln!(
                w,
                "{:.6} {:.6} {:.6} {} {} {}",
                (gv[0] as f64 + 0.5) * self.l_voxel,
                (gv[1] as f64 + 0.5) * self.l_voxel,
                (gv[2] as f64 + 0.5) * self.l_voxel,
                vx.instance_id,
                vx.semantic_label,
                if vx.movable { 1 } else { 0 }
            )?;
        }
        Ok(())
    }

    pub fn read_text(content: &str) -> Result<Self, SimError> {
        let mut l_voxel = None;
        let mut voxels = BTreeMap::new();
        for line in content.lines() {
            if let Some(rest) = line.strip_prefix("# voxel ") {
                l_voxel = rest.trim().parse::<f64>().ok();
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let l = l_voxel.ok_or_else(|| SimError::Parse("missing voxel header".into()))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(SimError::Parse(format!("expected 6 columns: {line:?}")));
            }
            let coord = |s: &str| -> Result<i64, SimError> {
                let x: f64 = s
                    .parse()
                    .map_err(|_| SimError::Parse(format!("bad number {s:?}")))?;
                Ok((x / l - 0.5).round() as i64)
            };
            let parse = |s: &str| -> Result<u32, SimError> {
                s.parse()
                    .map_err(|_| SimError::Parse(format!("bad integer {s:?}")))
            };
            voxels.insert(
                [coord(parts[0])?, coord(parts[1])?, coord(parts[2])?],
                GtVoxel {
                    instance_id: parse(parts[3])?,
                    semantic_label: parse(parts[4])?,
                    movable: parse(parts[5])? != 0,
                },
            );
        }
        Ok(Self {
            l_voxel: l_voxel.ok_or_else(|| SimError::Parse("missing voxel header".into()))?,
            voxels,
        })
    }
}

/// Builds the per-step ground-truth maps: noiseless surface points are
/// accumulated from step 0, movable-object points are carried to their
/// current poses, and each step's accumulation is voxelized within the
/// egocentric window (labels by point-count majority).
pub fn build_ground_truth(
    scene: &Scene,
    cam: &CameraModel,
    steps: u32,
    m: u32,
    l_voxel: f64,
    stride: u32,
) -> Vec<GroundTruthMap> {
    let stride = stride.max(1);
    let labels = scene.label_table();
    let side = 1i64 << m;
    let half = side as f64 * l_voxel / 2.0;
    // Static surface points binned at the map lattice; per-voxel vote counts
    // keyed by (instance, semantic).
    let mut static_votes: BTreeMap<[i64; 3], BTreeMap<(InstanceId, u32), u32>> = BTreeMap::new();
    // Movable-object surface points in local frames, deduplicated on a finer
    // lattice to survive rotation.
    let mut movable_local: BTreeMap<usize, BTreeMap<[i64; 3], Point3<f64>>> = BTreeMap::new();
    let fine = l_voxel / 3.0;

    let mut out = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let (pose, depth, obj) = render_geometry(scene, cam, step);
        let cam_to_map = pose.cam_to_map;
        let mut v = 0;
        while v < cam.height {
            let mut u = 0;
            while u < cam.width {
                let d = depth.at(u, v) as f64;
                let oi = obj.at(u, v);
                if oi != u32::MAX && d.is_finite() {
                    let p_cam = cam.unproject(u as f64 + 0.5, v as f64 + 0.5, d);
                    let p_map = cam_to_map.apply(&p_cam);
                    let object = &scene.objects[oi as usize];
                    if object.movable {
                        let local = object.trajectory.pose_at(step).inverse().apply(&p_map);
                        let key = [
                            (local.x / fine).floor() as i64,
                            (local.y / fine).floor() as i64,
                            (local.z / fine).floor() as i64,
                        ];
                        movable_local
                            .entry(oi as usize)
                            .or_default()
                            .entry(key)
                            .or_insert(local);
                    } else {
                        let gv = [
                            (p_map.x / l_voxel).floor() as i64,
                            (p_map.y / l_voxel).floor() as i64,
                            (p_map.z / l_voxel).floor() as i64,
                        ];
                        *static_votes
                            .entry(gv)
                            .or_default()
                            .entry((object.instance_id, labels[&object.label]))
                            .or_insert(0) += 1;
                    }
                }
                u += stride;
            }
            v += stride;
        }

        // Window bounds at this step (same rule as the particle grid).
        let center = pose.position();
        let origin: [i64; 3] = [
            ((center.x - half) / l_voxel).floor() as i64,
            ((center.y - half) / l_voxel).floor() as i64,
            ((center.z - half) / l_voxel).floor() as i64,
        ];
        let in_window = |gv: &[i64; 3]| (0..3).all(|a| gv[a] >= origin[a] && gv[a] - origin[a] < side);

        let mut votes: BTreeMap<[i64; 3], BTreeMap<(InstanceId, u32), u32>> = BTreeMap::new();
        for (gv, vv) in &static_votes {
            if in_window(gv) {
                votes.insert(*gv, vv.clone());
            }
        }
        for (oi, locals) in &movable_local {
            let object = &scene.objects[*oi];
            let t = object.trajectory.pose_at(step);
            let key = (object.instance_id, labels[&object.label]);
            for local in locals.values() {
                let p = t.apply(local);
                let gv = [
                    (p.x / l_voxel).floor() as i64,
                    (p.y / l_voxel).floor() as i64,
                    (p.z / l_voxel).floor() as i64,
                ];
                if in_window(&gv) {
                    *votes.entry(gv).or_default().entry(key).or_insert(0) += 1;
                }
            }
        }

        let mut voxels = BTreeMap::new();
        for (gv, vv) in votes {
            // Majority vote; ties resolve to the smaller (instance, label).
            let ((instance_id, semantic_label), _) = vv
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(k, c)| (*k, *c))
                .unwrap();
            let movable = scene
                .objects
                .iter()
                .find(|o| o.instance_id == instance_id)
                .map_or(false, |o| o.movable);
            voxels.insert(
                gv,
                GtVoxel {
                    instance_id,
                    semantic_label,
                    movable,
                },
            );
        }
        out.push(GroundTruthMap { l_voxel, voxels });
    }
    out
}

// ---------------------------------------------------------------------------
// Scene file schema (human-readable TOML).

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub camera: Vec<KeyframeSpec>,
    #[serde(rename = "object")]
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: InstanceId,
    pub label: String,
    #[serde(default)]
    pub movable: bool,
    pub shape: ShapeSpec,
    pub keyframes: Vec<KeyframeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShapeSpec {
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
    Cylinder { radius: f64, height: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeSpec {
    pub step: u32,
    pub position: [f64; 3],
    /// Euler angles (roll, pitch, yaw) in degrees, applied about x, y, z.
    #[serde(default)]
    pub rotation_deg: [f64; 3],
    /// Alternative to rotation: aim the +z axis at this point (y kept
    /// downward). Used mainly for the camera.
    #[serde(default)]
    pub look_at: Option<[f64; 3]>,
}

impl KeyframeSpec {
    fn to_keyframe(&self) -> (u32, UnitQuaternion<f64>, Vector3<f64>) {
        let position = Vector3::new(self.position[0], self.position[1], self.position[2]);
        let q = if let Some(target) = self.look_at {
            look_at_rotation(
                &Point3::from(position),
                &Point3::new(target[0], target[1], target[2]),
            )
        } else {
            UnitQuaternion::from_euler_angles(
                self.rotation_deg[0].to_radians(),
                self.rotation_deg[1].to_radians(),
                self.rotation_deg[2].to_radians(),
            )
        };
        (self.step, q, position)
    }
}

/// Rotation aiming the camera's +z at `target` with +y as downward as
/// possible (map-frame down is +y).
pub fn look_at_rotation(eye: &Point3<f64>, target: &Point3<f64>) -> UnitQuaternion<f64> {
    let forward = (target - eye).normalize();
    let down_hint = Vector3::new(0.0, 1.0, 0.0);
    let mut y = down_hint - forward * down_hint.dot(&forward);
    if y.norm() < 1e-9 {
        y = Vector3::new(0.0, 0.0, 1.0) - forward * forward.z;
    }
    let y = y.normalize();
    let x = y.cross(&forward);
    let m = Matrix3::from_columns(&[x, y, forward]);
    UnitQuaternion::from_matrix(&m)
}

/// Parses a scene from the TOML schema.
pub fn parse_scene(content: &str) -> Result<Scene, SimError> {
    let file: SceneFile = toml::from_str(content).map_err(|e| SimError::Parse(e.to_string()))?;
    scene_from_file(&file)
}

pub fn scene_from_file(file: &SceneFile) -> Result<Scene, SimError> {
    if file.camera.is_empty() {
        return Err(SimError::NoCamera);
    }
    let camera_track = Trajectory::new(file.camera.iter().map(|k| k.to_keyframe()).collect());
    let mut objects = Vec::new();
    for spec in &file.objects {
        if spec.keyframes.is_empty() {
            return Err(SimError::NoKeyframes(spec.label.clone()));
        }
        let shape = match &spec.shape {
            ShapeSpec::Box { size } => Shape::Box {
                half: Vector3::new(size[0] / 2.0, size[1] / 2.0, size[2] / 2.0),
            },
            ShapeSpec::Sphere { radius } => Shape::Sphere { radius: *radius },
            ShapeSpec::Cylinder { radius, height } => Shape::Cylinder {
                radius: *radius,
                half_height: height / 2.0,
            },
        };
        objects.push(SceneObject {
            instance_id: spec.id,
            label: spec.label.clone(),
            movable: spec.movable,
            shape,
            trajectory: Trajectory::new(spec.keyframes.iter().map(|k| k.to_keyframe()).collect()),
        });
    }
    Ok(Scene {
        objects,
        camera_track,
    })
}

/// A compact five-object static demo scene: ground plane, back wall, two
/// boxes, a sphere and a cylinder, viewed from a fixed camera at the origin.
pub fn demo_scene() -> Scene {
    let identity = UnitQuaternion::identity();
    let fixed = |x: f64, y: f64, z: f64| Trajectory::fixed(identity, Vector3::new(x, y, z));
    Scene {
        objects: vec![
            SceneObject {
                instance_id: 1,
                label: "ground".into(),
                movable: false,
                shape: Shape::Box {
                    half: Vector3::new(8.0, 0.1, 8.0),
                },
                trajectory: fixed(0.0, 1.6, 4.0),
            },
            SceneObject {
                instance_id: 2,
                label: "wall".into(),
                movable: false,
                shape: Shape::Box {
                    half: Vector3::new(8.0, 3.0, 0.1),
                },
                trajectory: fixed(0.0, -1.0, 9.0),
            },
            SceneObject {
                instance_id: 3,
                label: "crate".into(),
                movable: true,
                shape: Shape::Box {
                    half: Vector3::new(0.5, 0.5, 0.5),
                },
                trajectory: fixed(-1.8, 1.0, 5.0),
            },
            SceneObject {
                instance_id: 4,
                label: "ball".into(),
                movable: true,
                shape: Shape::Sphere { radius: 0.5 },
                trajectory: fixed(1.8, 1.0, 5.5),
            },
            SceneObject {
                instance_id: 5,
                label: "drum".into(),
                movable: true,
                shape: Shape::Cylinder {
                    radius: 0.4,
                    half_height: 0.6,
                },
                trajectory: Trajectory::fixed(
                    UnitQuaternion::from_euler_angles(std::f64::consts::FRAC_PI_2, 0.0, 0.0),
                    Vector3::new(0.0, 1.0, 6.5),
                ),
            },
        ],
        camera_track: Trajectory::fixed(identity, Vector3::zeros()),
    }
}
