//! Template memory: completely observed instances are stored as particle
//! templates keyed by semantic label, matched against newly observed
//! instances to conjecture their occluded portion.
//!
//! Matching scores a candidate transform by binning the transformed template
//! particles into the measurement bounding box's voxels and correlating the
//! clamped per-voxel mass with the observation evidence: +1 where a
//! measurement point lies, -1 where raycasting shows free space, 0 elsewhere.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{LabeledVoxelMap, VoxelStatus};
use crate::geometry::{RayTraversal, RigidTransform};
use crate::grid::{InstanceId, InstanceRegistry, VoxelGrid};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("no measurement points")]
    EmptyMeasurement,
    #[error("measurement bounding box too large ({0} voxels)")]
    BoxTooLarge(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed template file: {0}")]
    BadFile(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryParams {
    pub enabled: bool,
    /// Ray-test fraction above which an instance counts as completely
    /// modeled.
    pub completeness_threshold: f64,
    /// Rays sampled for the completeness test.
    pub ray_count: usize,
    /// Minimum measurement points of a new instance to attempt matching.
    pub trigger_points: usize,
    /// Minimum similarity score to accept a match.
    pub thr_score: f64,
    /// Alignment proposals per template.
    pub ransac_iters: usize,
    /// Stop searching a template once this score is reached.
    pub early_exit_score: f64,
    /// A new template scoring at least this against a stored same-label
    /// template (under identity) is pruned as a duplicate.
    pub prune_threshold: f64,
    /// Voxel size of the matching grid; 0 means "use the map voxel size".
    pub match_voxel: f64,
    /// Downsampled point budget for alignment proposals.
    pub max_match_points: usize,
}

impl Default for MemoryParams {
    fn default() -> Self {
        Self {
            enabled: true,
            completeness_threshold: 0.9,
            ray_count: 1000,
            trigger_points: 5000,
            thr_score: 0.6,
            ransac_iters: 200,
            early_exit_score: 0.9,
            prune_threshold: 0.95,
            match_voxel: 0.0,
            max_match_points: 256,
        }
    }
}

impl MemoryParams {
    pub fn match_voxel_or(&self, l_voxel: f64) -> f64 {
        if self.match_voxel > 0.0 {
            self.match_voxel
        } else {
            l_voxel
        }
    }
}

/// Stored particle set of a completely observed instance, in an object-local
/// frame anchored at the voxel-mass center.
#[derive(Debug, Clone)]
pub struct Template {
    pub semantic_label: u32,
    /// Local positions and weights; never empty.
    pub particles: Vec<(Point3<f64>, f64)>,
    pub source_instance: InstanceId,
    pub created_step: u32,
}

impl Template {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Library of templates grouped by semantic label. A label can hold several
/// templates with distinct shapes; near-identical ones are pruned on store.
#[derive(Debug, Clone, Default)]
pub struct TemplateLibrary {
    by_label: BTreeMap<u32, Vec<Template>>,
}

impl TemplateLibrary {
    pub fn templates(&self, semantic_label: u32) -> &[Template] {
        self.by_label
            .get(&semantic_label)
            .map_or(&[], |v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.by_label.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.by_label.values().flatten()
    }

    pub fn push(&mut self, template: Template) {
        self.by_label
            .entry(template.semantic_label)
            .or_default()
            .push(template);
    }
}

/// Result of matching a new instance against the library.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub semantic_label: u32,
    pub template_index: usize,
    /// Template-local to map-frame transform.
    pub transform: RigidTransform,
    pub score: f64,
}

/// Deterministic unit directions roughly uniform on the sphere.
pub fn fibonacci_directions(count: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Fraction of rays, sampled uniformly from the voxel-mass center, that hit
/// an instance voxel before leaving the instance's bounding box. The origin
/// voxel itself does not count as a hit; a single-voxel instance scores 0.
pub fn completeness(instance_voxels: &[[i64; 3]], l_voxel: f64, ray_count: usize) -> f64 {
    if instance_voxels.is_empty() || ray_count == 0 {
        return 0.0;
    }
    let set: std::collections::BTreeSet<[i64; 3]> = instance_voxels.iter().copied().collect();
    let mut bbox_min = [i64::MAX; 3];
    let mut bbox_max = [i64::MIN; 3];
    let mut center = Vector3::zeros();
    for v in instance_voxels {
        for a in 0..3 {
            bbox_min[a] = bbox_min[a].min(v[a]);
            bbox_max[a] = bbox_max[a].max(v[a]);
        }
        center += Vector3::new(
            (v[0] as f64 + 0.5) * l_voxel,
            (v[1] as f64 + 0.5) * l_voxel,
            (v[2] as f64 + 0.5) * l_voxel,
        );
    }
    center /= instance_voxels.len() as f64;
    let origin = Point3::from(center);
    let max_steps = 4 * (bbox_max[0] - bbox_min[0] + bbox_max[1] - bbox_min[1] + bbox_max[2]
        - bbox_min[2]
        + 3) as usize;

    let mut hits = 0usize;
    for dir in fibonacci_directions(ray_count) {
        for (i, step) in RayTraversal::new_unchecked(&origin, &dir, l_voxel)
            .take(max_steps)
            .enumerate()
        {
            let v = step.index;
            if (0..3).any(|a| v[a] < bbox_min[a] || v[a] > bbox_max[a]) {
                break;
            }
            if i == 0 {
                continue; // the origin voxel does not block its own rays
            }
            if set.contains(&v) {
                hits += 1;
                break;
            }
        }
    }
    hits as f64 / ray_count as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreOutcome {
    Stored,
    NotComplete,
    Duplicate,
    AlreadyTemplated,
    NoVoxels,
}

/// Stores the instance's particles as a template when the completeness test
/// passes. Near-duplicates of stored same-label templates are pruned.
pub fn maybe_store_template(
    grid: &VoxelGrid,
    registry: &mut InstanceRegistry,
    map: &LabeledVoxelMap,
    library: &mut TemplateLibrary,
    instance_id: InstanceId,
    params: &MemoryParams,
    step: u32,
) -> Result<StoreOutcome, MemoryError> {
    let record = registry
        .get(instance_id)
        .ok_or(MemoryError::UnknownInstance(instance_id))?;
    if record.templated {
        return Ok(StoreOutcome::AlreadyTemplated);
    }
    let semantic_label = record.semantic_label;
    let voxels: Vec<[i64; 3]> = map
        .voxels
        .iter()
        .filter(|(_, l)| l.status == VoxelStatus::Occupied && l.instance_id == instance_id)
        .map(|(v, _)| *v)
        .collect();
    if voxels.is_empty() {
        return Ok(StoreOutcome::NoVoxels);
    }
    let fraction = completeness(&voxels, grid.l_voxel(), params.ray_count);
    if fraction <= params.completeness_threshold {
        return Ok(StoreOutcome::NotComplete);
    }

    // Anchor at the voxel-mass center and re-express the particles locally.
    let mut anchor = Vector3::zeros();
    for v in &voxels {
        anchor += grid.voxel_center(*v).coords;
    }
    anchor /= voxels.len() as f64;
    let mut particles = Vec::new();
    for v in &voxels {
        if let Some(cell) = grid.cell_at(*v) {
            for p in grid.slots(cell).iter().filter(|p| p.valid) {
                if p.instance_id == instance_id {
                    particles.push((Point3::from(p.position.coords - anchor), p.weight));
                }
            }
        }
    }
    if particles.is_empty() {
        return Ok(StoreOutcome::NoVoxels);
    }
    let template = Template {
        semantic_label,
        particles,
        source_instance: instance_id,
        created_step: step,
    };

    // Prune near-identical shapes: score the new template's own point set
    // against stored ones under the identity transform.
    let voxel = params.match_voxel_or(grid.l_voxel());
    let self_points: Vec<Point3<f64>> = template.particles.iter().map(|(p, _)| *p).collect();
    let evidence = MatchEvidence::from_occupancy_only(&self_points, voxel)?;
    for stored in library.templates(semantic_label) {
        let score = similarity(&evidence, stored, &RigidTransform::identity());
        if score >= params.prune_threshold {
            registry
                .get_mut(instance_id)
                .expect("checked above")
                .templated = true;
            return Ok(StoreOutcome::Duplicate);
        }
    }
    library.push(template);
    registry
        .get_mut(instance_id)
        .expect("checked above")
        .templated = true;
    Ok(StoreOutcome::Stored)
}

/// Observation evidence over the measurement bounding box, divided into
/// matching voxels: +1 holds a measurement point, -1 observed free space,
/// 0 unknown. The score normalizer counts the informative voxels (h != 0);
/// voxels with no evidence cannot reward or punish a candidate and would
/// otherwise make the score scale with the unobservable interior.
#[derive(Debug, Clone)]
pub struct MatchEvidence {
    pub voxel: f64,
    bbox_min: [i64; 3],
    bbox_max: [i64; 3],
    h: BTreeMap<[i64; 3], i8>,
    n_voxels: usize,
}

const MAX_EVIDENCE_VOXELS: usize = 2_000_000;

fn voxel_of(p: &Point3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

impl MatchEvidence {
    /// Builds the evidence from measurement points plus free-space voxels
    /// obtained by raycasting from the camera position toward every point.
    pub fn build(
        points: &[Point3<f64>],
        camera_pos: &Point3<f64>,
        voxel: f64,
    ) -> Result<Self, MemoryError> {
        let mut ev = Self::from_occupancy_only(points, voxel)?;
        for target in points {
            let delta = target - camera_pos;
            let dist = delta.norm();
            if dist < voxel {
                continue;
            }
            let dir = delta / dist;
            let target_voxel = voxel_of(target, voxel);
            let mut entered = false;
            for step in RayTraversal::new_unchecked(camera_pos, &dir, voxel) {
                if step.t_enter >= dist {
                    break;
                }
                let v = step.index;
                let inside = (0..3).all(|a| v[a] >= ev.bbox_min[a] && v[a] <= ev.bbox_max[a]);
                if !inside {
                    if entered {
                        break;
                    }
                    continue;
                }
                entered = true;
                if v == target_voxel {
                    break;
                }
                ev.h.entry(v).or_insert(-1);
            }
        }
        ev.n_voxels = ev.h.len();
        Ok(ev)
    }

    /// Evidence with only the occupancy marks (+1), used for duplicate
    /// detection between templates.
    pub fn from_occupancy_only(points: &[Point3<f64>], voxel: f64) -> Result<Self, MemoryError> {
        if points.is_empty() {
            return Err(MemoryError::EmptyMeasurement);
        }
        let mut bbox_min = [i64::MAX; 3];
        let mut bbox_max = [i64::MIN; 3];
        let mut h = BTreeMap::new();
        for p in points {
            let v = voxel_of(p, voxel);
            for a in 0..3 {
                bbox_min[a] = bbox_min[a].min(v[a]);
                bbox_max[a] = bbox_max[a].max(v[a]);
            }
            h.insert(v, 1i8);
        }
        let bbox_volume: usize = (0..3)
            .map(|a| (bbox_max[a] - bbox_min[a] + 1) as usize)
            .product();
        if bbox_volume > MAX_EVIDENCE_VOXELS {
            return Err(MemoryError::BoxTooLarge(bbox_volume));
        }
        let n_voxels = h.len();
        Ok(Self {
            voxel,
            bbox_min,
            bbox_max,
            h,
            n_voxels,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }
}

/// Similarity between the observation evidence and a template under a
/// candidate transform: the per-voxel template mass (clamped to 1)
/// correlated with the evidence and normalized by the box's voxel count.
/// Always in [-1, 1].
pub fn similarity(evidence: &MatchEvidence, template: &Template, t: &RigidTransform) -> f64 {
    if template.is_empty() {
        return 0.0;
    }
    let voxel = evidence.voxel;
    let mut mass: BTreeMap<[i64; 3], f64> = BTreeMap::new();
    for (pos, w) in &template.particles {
        let p = t.apply(pos);
        let v = voxel_of(&p, voxel);
        if (0..3).all(|a| v[a] >= evidence.bbox_min[a] && v[a] <= evidence.bbox_max[a]) {
            *mass.entry(v).or_insert(0.0) += w;
        }
    }
    let mut score = 0.0;
    for (v, m) in &mass {
        if let Some(&h) = evidence.h.get(v) {
            score += m.min(1.0) * h as f64;
        }
    }
    score / evidence.n_voxels as f64
}

/// Deterministic voxel-grid downsampling: at most one point per voxel, then
/// an even subsample down to `cap`.
fn downsample(points: &[Point3<f64>], voxel: f64, cap: usize) -> Vec<Point3<f64>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for p in points {
        if seen.insert(voxel_of(p, voxel)) {
            out.push(*p);
        }
    }
    if out.len() > cap {
        let step = out.len() as f64 / cap as f64;
        out = (0..cap).map(|i| out[(i as f64 * step) as usize]).collect();
    }
    out
}

/// Least-squares rigid alignment mapping `from` onto `to` (same length).
fn kabsch(from: &[Point3<f64>], to: &[Point3<f64>]) -> Option<RigidTransform> {
    let n = from.len();
    if n < 3 {
        return None;
    }
    let cf = from.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let ct = to.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let mut h = Matrix3::zeros();
    for (f, t) in from.iter().zip(to) {
        h += (f.coords - cf) * (t.coords - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let t = ct - r * cf;
    Some(RigidTransform::from_parts_unchecked(r, t))
}

/// Principal-axis alignment seeds: rotations aligning the template's
/// principal axes with the measurement's over the four proper sign
/// combinations, plus a translation-only seed.
fn pca_seeds(tmpl: &[Point3<f64>], meas: &[Point3<f64>]) -> Vec<RigidTransform> {
    let centroid = |pts: &[Point3<f64>]| {
        pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / pts.len() as f64
    };
    let axes = |pts: &[Point3<f64>], c: &Vector3<f64>| {
        let mut cov = Matrix3::zeros();
        for p in pts {
            let d = p.coords - c;
            cov += d * d.transpose();
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut m = Matrix3::zeros();
        for (col, &src) in order.iter().enumerate() {
            m.set_column(col, &eig.eigenvectors.column(src));
        }
        if m.determinant() < 0.0 {
            let c2 = -m.column(2).clone_owned();
            m.set_column(2, &c2);
        }
        m
    };
    let ct = centroid(tmpl);
    let cm = centroid(meas);
    let at = axes(tmpl, &ct);
    let am = axes(meas, &cm);
    let mut seeds = vec![RigidTransform::from_translation(cm - ct)];
    for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let signs = Matrix3::from_diagonal(&Vector3::new(sx, sy, sx * sy));
        let r = am * signs * at.transpose();
        seeds.push(RigidTransform::from_parts_unchecked(r, cm - r * ct));
    }
    seeds
}

/// Cheap proxy for [`similarity`] over the downsampled template points:
/// fraction-weighted agreement of transformed points with the evidence.
fn fast_score(evidence: &MatchEvidence, tmpl_ds: &[Point3<f64>], t: &RigidTransform) -> f64 {
    let mut acc = 0i64;
    for p in tmpl_ds {
        let v = voxel_of(&t.apply(p), evidence.voxel);
        if let Some(&h) = evidence.h.get(&v) {
            acc += h as i64;
        }
    }
    acc as f64 / tmpl_ds.len() as f64
}

/// Iterative closest point refinement of a rough alignment between the
/// downsampled point sets.
fn icp_refine(
    tmpl_ds: &[Point3<f64>],
    meas_ds: &[Point3<f64>],
    t0: &RigidTransform,
    max_pair_dist: f64,
    iterations: usize,
) -> RigidTransform {
    let mut t = *t0;
    for _ in 0..iterations {
        let transformed: Vec<Point3<f64>> = tmpl_ds.iter().map(|p| t.apply(p)).collect();
        let mut from = Vec::new();
        let mut to = Vec::new();
        for m in meas_ds {
            let mut best = max_pair_dist * max_pair_dist;
            let mut best_i = usize::MAX;
            for (i, q) in transformed.iter().enumerate() {
                let d = (m - q).norm_squared();
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
            if best_i != usize::MAX {
                from.push(tmpl_ds[best_i]);
                to.push(*m);
            }
        }
        match kabsch(&from, &to) {
            Some(next) => t = next,
            None => break,
        }
    }
    t
}

/// Matches a new instance's measurement points against the same-label
/// templates. Candidate transforms come from principal-axis seeds with a
/// local translation grid search and from random 3-correspondence hypotheses
/// with congruent pairwise distances; promising candidates are refined by a
/// few closest-point iterations and scored with [`similarity`]. The best
/// transform is returned when it reaches the score threshold.
pub fn match_instance(
    points: &[Point3<f64>],
    camera_pos: &Point3<f64>,
    library: &TemplateLibrary,
    semantic_label: u32,
    l_voxel: f64,
    params: &MemoryParams,
    rng: &mut impl Rng,
) -> Result<Option<MatchResult>, MemoryError> {
    let templates = library.templates(semantic_label);
    if templates.is_empty() {
        return Ok(None);
    }
    let voxel = params.match_voxel_or(l_voxel);
    let evidence = MatchEvidence::build(points, camera_pos, voxel)?;
    let meas_ds = downsample(points, voxel, params.max_match_points);
    let tolerance = voxel;

    let mut best: Option<MatchResult> = None;
    'templates: for (index, template) in templates.iter().enumerate() {
        let tmpl_pts: Vec<Point3<f64>> = template.particles.iter().map(|(p, _)| *p).collect();
        let tmpl_ds = downsample(&tmpl_pts, voxel, params.max_match_points);
        if tmpl_ds.len() < 3 || meas_ds.len() < 3 {
            continue;
        }
        // Sorted pair-distance table for congruence lookups.
        let mut pairs: Vec<(f64, u32, u32)> = Vec::new();
        for i in 0..tmpl_ds.len() {
            for j in (i + 1)..tmpl_ds.len() {
                pairs.push(((tmpl_ds[i] - tmpl_ds[j]).norm(), i as u32, j as u32));
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let dists: Vec<f64> = pairs.iter().map(|p| p.0).collect();

        let mut rough: Vec<(f64, RigidTransform)> = Vec::new();

        // Principal-axis seeds, each with a local translation grid search to
        // counter the bias of the partially observed centroid.
        for seed in pca_seeds(&tmpl_ds, &meas_ds) {
            let mut local_best = (f64::NEG_INFINITY, seed);
            for dx in -2i32..=2 {
                for dy in -2i32..=2 {
                    for dz in -2i32..=2 {
                        let shift =
                            Vector3::new(dx as f64, dy as f64, dz as f64) * voxel;
                        let cand = RigidTransform::from_parts_unchecked(
                            *seed.rotation(),
                            seed.translation() + shift,
                        );
                        let s = fast_score(&evidence, &tmpl_ds, &cand);
                        if s > local_best.0 {
                            local_best = (s, cand);
                        }
                    }
                }
            }
            rough.push(local_best);
        }

        // Random congruent-triple hypotheses.
        for _ in 0..params.ransac_iters {
            let a = rng.gen_range(0..meas_ds.len());
            let b = rng.gen_range(0..meas_ds.len());
            let c = rng.gen_range(0..meas_ds.len());
            if a == b || b == c || a == c {
                continue;
            }
            let (ma, mb, mc) = (meas_ds[a], meas_ds[b], meas_ds[c]);
            let d_ab = (ma - mb).norm();
            let d_ac = (ma - mc).norm();
            let d_bc = (mb - mc).norm();
            if d_ab < 2.0 * tolerance || d_ac < 2.0 * tolerance || d_bc < 2.0 * tolerance {
                continue;
            }
            let lo = dists.partition_point(|&d| d < d_ab - tolerance);
            let hi = dists.partition_point(|&d| d < d_ab + tolerance);
            if lo >= hi {
                continue;
            }
            let (_, pi, qi) = pairs[rng.gen_range(lo..hi)];
            let (p, q) = (tmpl_ds[pi as usize], tmpl_ds[qi as usize]);
            // Both assignments of (p, q) to (a, b); r must match c.
            for (pa, pb) in [(p, q), (q, p)] {
                let mut candidates: Vec<Point3<f64>> = Vec::new();
                for r in &tmpl_ds {
                    if ((r - pa).norm() - d_ac).abs() < tolerance
                        && ((r - pb).norm() - d_bc).abs() < tolerance
                    {
                        candidates.push(*r);
                    }
                }
                if candidates.is_empty() {
                    continue;
                }
                let r = candidates[rng.gen_range(0..candidates.len())];
                if let Some(t) = kabsch(&[pa, pb, r], &[ma, mb, mc]) {
                    rough.push((fast_score(&evidence, &tmpl_ds, &t), t));
                }
            }
        }

        // Refine and fully score the most promising candidates.
        rough.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (_, cand) in rough.iter().take(8) {
            let refined = icp_refine(&tmpl_ds, &meas_ds, cand, 3.0 * voxel, 4);
            for t in [refined, *cand] {
                let score = similarity(&evidence, template, &t);
                if best.as_ref().map_or(true, |b| score > b.score) {
                    best = Some(MatchResult {
                        semantic_label,
                        template_index: index,
                        transform: t,
                        score,
                    });
                }
                if score >= params.early_exit_score {
                    continue 'templates;
                }
            }
        }
    }
    Ok(best.filter(|b| b.score >= params.thr_score))
}

/// Writes one template per file: a text header followed by text particle
/// records `x y z weight` in the object-local frame.
pub fn write_template<W: Write>(template: &Template, w: &mut W) -> Result<(), MemoryError> {
    writeln!(w, "phdmap-template v1")?;
    writeln!(w, "label {}", template.semantic_label)?;
    writeln!(w, "source {}", template.source_instance)?;
    writeln!(w, "created {}", template.created_step)?;
    writeln!(w, "count {}", template.particles.len())?;
    writeln!(w, "---")?;
    for (p, weight) in &template.particles {
        writeln!(w, "{} {} {} {}", p.x, p.y, p.z, weight)?;
    }
    Ok(())
}

pub fn read_template<R: BufRead>(r: &mut R) -> Result<Template, MemoryError> {
    let mut label = None;
    let mut source = None;
    let mut created = None;
    let mut count = None;
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(MemoryError::BadFile("missing --- separator".into()));
        }
        let trimmed = line.trim();
        if trimmed == "---" {
            break;
        }
        let mut it = trimmed.split_whitespace();
        match it.next() {
            Some("label") => label = it.next().and_then(|v| v.parse().ok()),
            Some("source") => source = it.next().and_then(|v| v.parse().ok()),
            Some("created") => created = it.next().and_then(|v| v.parse().ok()),
            Some("count") => count = it.next().and_then(|v| v.parse().ok()),
            _ => {}
        }
    }
    let count: usize = count.ok_or_else(|| MemoryError::BadFile("missing count".into()))?;
    let mut particles = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(MemoryError::BadFile("truncated particle records".into()));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MemoryError::BadFile(format!("bad particle line: {e}")))?;
        if vals.len() != 4 {
            return Err(MemoryError::BadFile("expected 4 columns".into()));
        }
        particles.push((Point3::new(vals[0], vals[1], vals[2]), vals[3]));
    }
    Ok(Template {
        semantic_label: label.ok_or_else(|| MemoryError::BadFile("missing label".into()))?,
        particles,
        source_instance: source.unwrap_or(0),
        created_step: created.unwrap_or(0),
    })
}
