//! The particle intensity filter: prediction with object-level transforms,
//! measurement update (individual or collective), particle birth, in-cell
//! resampling, and per-voxel occupancy / instance / semantic estimation.
//!
//! Two update modes are supported. Individual filtering (IF) updates a
//! particle only with measurements sharing its instance ID. Collective
//! filtering (CF) updates with all nearby measurements through an ID
//! transition factor and a truncated exponential forgetting factor, which
//! tolerates segmentation and tracking noise; with the transition constant at
//! zero and forgetting disabled, CF degenerates to IF.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::InstanceObservation;
use crate::geometry::RigidTransform;
use crate::grid::{
    DiscardReason, InsertOutcome, InstanceId, InstanceRegistry, Particle, VoxelGrid,
};
use crate::visibility::{MeasurementPoint, UpdateIndicesImage};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed map export: {0}")]
    BadMapFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Individual filtering: same-ID measurements only.
    If,
    /// Collective filtering: all measurements via ID transition + forgetting.
    Cf,
}

/// Filter configuration. Defaults follow the reference parameterization:
/// detection 0.98, survival 1, clutter 0.01, prediction noise 0.01 I,
/// measurement noise (1e-3 d + 1e-2) I, transition constant 0.5, forgetting
/// speed 1 with horizon 5, five newborns of weight 0.001 per measurement,
/// occupancy threshold 0.8, cell capacity 8 and box dilation 5 px.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Detection probability P_d.
    pub p_d: f64,
    /// Survival probability P_s.
    pub p_s: f64,
    /// Clutter intensity (constant).
    pub kappa: f64,
    /// Prediction noise variance per axis (diagonal covariance entry, m^2).
    pub q_var: f64,
    /// Measurement noise deviation: sigma(d) = sigma_a * d + sigma_b.
    pub sigma_a: f64,
    pub sigma_b: f64,
    /// ID transition constant in [0, 1).
    pub p_tr: f64,
    /// Forgetting speed S (> 0).
    pub forgetting_s: f64,
    /// Forgetting horizon (steps).
    pub forgetting_horizon: u32,
    pub forgetting_enabled: bool,
    /// Newborn particles per measurement point.
    pub l_b: u32,
    /// Newborn particle weight.
    pub w_b: f64,
    /// Occupancy threshold on the per-voxel weight sum (inclusive).
    pub thr_occ: f64,
    pub update_mode: UpdateMode,
    /// Fixed activation-box dilation in pixels per side.
    pub bbox_dilation_px: u32,
    /// Likelihood floor defining the activation radius.
    pub activation_epsilon: f64,
    /// Fraction of the Gaussian peak below which a same-ID update does not
    /// refresh a particle's match timestamp.
    pub negligible_peak_fraction: f64,
    /// Maximum particles per voxel cell.
    pub cell_capacity: u32,
    /// Pixel stride for measurement extraction.
    pub measurement_stride: u32,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            p_d: 0.98,
            p_s: 1.0,
            kappa: 0.01,
            q_var: 0.01,
            sigma_a: 1e-3,
            sigma_b: 1e-2,
            p_tr: 0.5,
            forgetting_s: 1.0,
            forgetting_horizon: 5,
            forgetting_enabled: true,
            l_b: 5,
            w_b: 0.001,
            thr_occ: 0.8,
            update_mode: UpdateMode::Cf,
            bbox_dilation_px: 5,
            activation_epsilon: 1e-6,
            negligible_peak_fraction: 1e-6,
            cell_capacity: 8,
            measurement_stride: 2,
        }
    }
}

impl FilterParams {
    pub fn sigma_at(&self, depth: f64) -> f64 {
        self.sigma_a * depth + self.sigma_b
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let checks = [
            (self.p_d > 0.0 && self.p_d <= 1.0, "p_d must be in (0, 1]"),
            (self.p_s > 0.0 && self.p_s <= 1.0, "p_s must be in (0, 1]"),
            (self.kappa >= 0.0, "kappa must be >= 0"),
            (self.q_var >= 0.0, "q_var must be >= 0"),
            (self.sigma_b > 0.0, "sigma_b must be > 0"),
            (self.sigma_a >= 0.0, "sigma_a must be >= 0"),
            (
                self.p_tr >= 0.0 && self.p_tr < 1.0,
                "p_tr must be in [0, 1)",
            ),
            (self.forgetting_s > 0.0, "forgetting_s must be > 0"),
            (self.w_b > 0.0, "w_b must be > 0"),
            (self.l_b >= 1, "l_b must be >= 1"),
            (self.thr_occ > 0.0, "thr_occ must be > 0"),
            (
                self.cell_capacity >= 1 && self.cell_capacity <= 255,
                "cell_capacity must be in 1..=255",
            ),
            (self.measurement_stride >= 1, "measurement_stride must be >= 1"),
            (
                self.activation_epsilon > 0.0,
                "activation_epsilon must be > 0",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(FilterError::BadParam(msg.into()));
            }
        }
        Ok(())
    }
}

/// Instance ID transition factor: 1 for matching IDs, `p_tr` otherwise.
pub fn id_transition(z_id: InstanceId, p_id: InstanceId, params: &FilterParams) -> f64 {
    if z_id == p_id {
        1.0
    } else {
        params.p_tr
    }
}

/// Truncated exponential forgetting factor over the steps since the particle
/// was last updated by a same-ID measurement.
pub fn forgetting(delta_k: u32, params: &FilterParams) -> f64 {
    if delta_k > params.forgetting_horizon {
        0.0
    } else {
        (-(delta_k as f64) / params.forgetting_s).exp()
    }
}

#[inline]
fn likelihood_factor(
    params: &FilterParams,
    z_id: InstanceId,
    p_id: InstanceId,
    delta_k: u32,
) -> f64 {
    match params.update_mode {
        UpdateMode::If => {
            if z_id == p_id {
                1.0
            } else {
                0.0
            }
        }
        UpdateMode::Cf => {
            let f_gt = if params.forgetting_enabled {
                forgetting(delta_k, params)
            } else {
                1.0
            };
            f_gt * id_transition(z_id, p_id, params)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PredictReport {
    pub relocated: usize,
    pub discarded_out_of_range: usize,
    pub discarded_full: usize,
    /// Occluded instances advanced with the constant-velocity extrapolation.
    pub extrapolated: Vec<InstanceId>,
    /// Occluded instances with no usable history (identity applied).
    pub missing_history: Vec<InstanceId>,
}

/// Constant-velocity extrapolation from the two most recent relative
/// transforms `a` (newest) and `b`: `a * b^-1 * a`.
fn extrapolate_transform(history: &[(u32, RigidTransform)]) -> Option<RigidTransform> {
    match history {
        [] => None,
        [(_, a)] => Some(*a),
        [.., (_, b), (_, a)] => Some(a.compose(&b.inverse()).compose(a)),
    }
}

/// Prediction step: multiplies all weights by the survival probability, then
/// moves every instance-of-interest particle by its per-frame transform
/// (observed) or a constant-velocity extrapolation (occluded), adding
/// Gaussian noise with variance `q_var` per axis. Background particles keep
/// their positions. Applied transforms are appended to the registry history.
pub fn predict(
    grid: &mut VoxelGrid,
    registry: &mut InstanceRegistry,
    observed: &[InstanceObservation],
    params: &FilterParams,
    step: u32,
    rng: &mut impl Rng,
) -> PredictReport {
    let mut report = PredictReport::default();
    grid.scale_all_weights(params.p_s);

    for obs in observed {
        registry.observe(obs.instance_id, obs.semantic_label, obs.movable, step);
    }

    // Resolve the transform for every movable instance known to the registry.
    let mut transforms: BTreeMap<InstanceId, RigidTransform> = BTreeMap::new();
    let observed_ids: BTreeMap<InstanceId, Option<RigidTransform>> = observed
        .iter()
        .filter(|o| o.movable)
        .map(|o| (o.instance_id, o.transform))
        .collect();
    let registry_movable: Vec<InstanceId> = registry
        .iter()
        .filter(|(_, r)| r.movable)
        .map(|(id, _)| *id)
        .collect();
    for id in registry_movable {
        let t = match observed_ids.get(&id) {
            Some(Some(t)) => *t,
            // Newly observed without an estimated transform: no motion yet.
            Some(None) => RigidTransform::identity(),
            None => {
                // Occluded: extrapolate from history.
                let rec = registry.get(id).expect("listed above");
                if rec.particles.is_empty() {
                    continue;
                }
                let hist: Vec<(u32, RigidTransform)> =
                    rec.transforms.iter().copied().collect();
                match extrapolate_transform(&hist) {
                    Some(t) => {
                        report.extrapolated.push(id);
                        t
                    }
                    None => {
                        report.missing_history.push(id);
                        RigidTransform::identity()
                    }
                }
            }
        };
        transforms.insert(id, t);
    }

    let needs_motion: BTreeMap<InstanceId, RigidTransform> = transforms
        .iter()
        .filter(|(_, t)| {
            params.q_var > 0.0 || t.max_abs_diff(&RigidTransform::identity()) > 0.0
        })
        .map(|(id, t)| (*id, *t))
        .collect();

    if !needs_motion.is_empty() {
        let normal = Normal::new(0.0, params.q_var.sqrt()).expect("valid stddev");
        let moved = grid.extract_by_instance(&|id| needs_motion.contains_key(&id));
        for mut p in moved {
            let t = &needs_motion[&p.instance_id];
            let mut pos = t.apply(&p.position);
            if params.q_var > 0.0 {
                pos += Vector3::new(
                    normal.sample(rng),
                    normal.sample(rng),
                    normal.sample(rng),
                );
            }
            p.position = pos;
            match grid.insert_particle(p, step, rng) {
                InsertOutcome::Accepted(_) | InsertOutcome::ResampledThenAccepted(_) => {
                    report.relocated += 1
                }
                InsertOutcome::Discarded(DiscardReason::OutOfRange) => {
                    report.discarded_out_of_range += 1
                }
                InsertOutcome::Discarded(DiscardReason::CellFull) => report.discarded_full += 1,
            }
        }
    }

    for (id, t) in &transforms {
        // Movable by construction; the history invariant only rejects
        // non-identity transforms on background instances.
        let _ = registry.push_transform(*id, step, *t);
    }
    report
}

#[derive(Debug, Clone, Default)]
pub struct UpdateReport {
    pub visible_particles: usize,
    pub measurement_count: usize,
    pub pair_evaluations: usize,
    pub matched_particles: usize,
}

// exp(-745) underflows to zero; skipping such pairs leaves sums bit-identical.
const EXP_UNDERFLOW: f64 = 745.0;

struct PreparedMeasurement {
    position: Point3<f64>,
    instance_id: InstanceId,
    norm: f64,
    inv_two_sigma_sq: f64,
    match_floor: f64,
    u_lo: u32,
    u_hi: u32,
    v_lo: u32,
    v_hi: u32,
}

/// Measurement update. For each visible particle `i`,
/// `w = [1 - P_d + sum_z P_d g(z|x_i) / (kappa + C(z))] * w_prior`, where
/// `C(z) = sum_j P_d w_j g(z|x_j)` accumulates over visible particles inside
/// the measurement's activation box, and the per-particle sum ranges over the
/// measurements whose activation box covers the particle's pixel. Particles
/// receiving a same-ID Gaussian factor above the negligibility floor get
/// their match timestamp set to `step`. Occluded and out-of-view particles
/// keep their prior weights.
pub fn update(
    grid: &mut VoxelGrid,
    indices: &UpdateIndicesImage,
    measurements: &[MeasurementPoint],
    params: &FilterParams,
    step: u32,
) -> UpdateReport {
    let mut report = UpdateReport {
        visible_particles: indices.entries().len(),
        measurement_count: measurements.len(),
        ..Default::default()
    };

    let width = indices.width as usize;
    let height = indices.height as usize;

    // Per-row measurement indices sorted by pixel column.
    let mut rows: Vec<Vec<(u32, u32)>> = vec![Vec::new(); height];
    let mut prepared = Vec::with_capacity(measurements.len());
    let (mut r_left, mut r_right, mut r_up, mut r_down) = (0i64, 0i64, 0i64, 0i64);
    for (i, z) in measurements.iter().enumerate() {
        rows[z.pixel.1 as usize].push((z.pixel.0, i as u32));
        let sigma2 = z.sigma * z.sigma;
        let norm = (2.0 * std::f64::consts::PI * sigma2).powf(-1.5);
        prepared.push(PreparedMeasurement {
            position: z.position,
            instance_id: z.instance_id,
            norm,
            inv_two_sigma_sq: 1.0 / (2.0 * sigma2),
            match_floor: norm * params.negligible_peak_fraction,
            u_lo: z.activation.u_lo,
            u_hi: z.activation.u_hi,
            v_lo: z.activation.v_lo,
            v_hi: z.activation.v_hi,
        });
        r_left = r_left.max(z.pixel.0 as i64 - z.activation.u_lo as i64);
        r_right = r_right.max(z.activation.u_hi as i64 - z.pixel.0 as i64);
        r_up = r_up.max(z.pixel.1 as i64 - z.activation.v_lo as i64);
        r_down = r_down.max(z.activation.v_hi as i64 - z.pixel.1 as i64);
    }
    for row in &mut rows {
        row.sort_unstable();
    }

    // Working copy of the visible particles' state (weights as predicted).
    struct Work {
        weight_prior: f64,
        instance_id: InstanceId,
        delta_k: u32,
        new_weight: f64,
        matched: bool,
    }
    let mut work: Vec<Work> = indices
        .entries()
        .iter()
        .map(|e| {
            let p = grid
                .resolve(e.reference)
                .expect("indices image references are fresh");
            Work {
                weight_prior: p.weight,
                instance_id: p.instance_id,
                delta_k: step.saturating_sub(p.last_match_step),
                new_weight: p.weight,
                matched: false,
            }
        })
        .collect();

    // A measurement at pixel p covers particle pixel q when q is inside p's
    // activation box; candidate pixels p lie within the maximal box extents.
    let covering = |pixel: (u32, u32), f: &mut dyn FnMut(u32, &PreparedMeasurement)| {
        let (qu, qv) = (pixel.0 as i64, pixel.1 as i64);
        let u_start = (qu - r_right).max(0) as u32;
        let u_end = ((qu + r_left) as usize).min(width - 1) as u32;
        let v_start = (qv - r_down).max(0) as usize;
        let v_end = ((qv + r_up) as usize).min(height - 1);
        for row in &rows[v_start..=v_end] {
            let begin = row.partition_point(|&(u, _)| u < u_start);
            for &(u, m) in &row[begin..] {
                if u > u_end {
                    break;
                }
                let z = &prepared[m as usize];
                if pixel.0 >= z.u_lo
                    && pixel.0 <= z.u_hi
                    && pixel.1 >= z.v_lo
                    && pixel.1 <= z.v_hi
                {
                    f(m, z);
                }
            }
        }
    };

    // Pass A: accumulate C(z) over box particles with predicted weights.
    let mut c = vec![0.0f64; measurements.len()];
    for (e, w) in indices.entries().iter().zip(&work) {
        covering(e.pixel, &mut |m, z| {
            let factor = likelihood_factor(params, z.instance_id, w.instance_id, w.delta_k);
            if factor == 0.0 {
                return;
            }
            let d2 = (e.position - z.position).norm_squared();
            let ex = d2 * z.inv_two_sigma_sq;
            if ex > EXP_UNDERFLOW {
                return;
            }
            let g = factor * z.norm * (-ex).exp();
            c[m as usize] += params.p_d * w.weight_prior * g;
        });
    }

    // Pass B: per-particle posterior weights.
    let mut pairs = 0usize;
    let mut matched_total = 0usize;
    for (e, w) in indices.entries().iter().zip(work.iter_mut()) {
        let mut acc = 0.0f64;
        covering(e.pixel, &mut |m, z| {
            pairs += 1;
            let d2 = (e.position - z.position).norm_squared();
            let ex = d2 * z.inv_two_sigma_sq;
            if ex > EXP_UNDERFLOW {
                return;
            }
            let g_pos = z.norm * (-ex).exp();
            let factor = likelihood_factor(params, z.instance_id, w.instance_id, w.delta_k);
            if factor != 0.0 {
                acc += params.p_d * factor * g_pos / (params.kappa + c[m as usize]);
            }
            if z.instance_id == w.instance_id && g_pos >= z.match_floor {
                w.matched = true;
            }
        });
        w.new_weight = (1.0 - params.p_d + acc) * w.weight_prior;
        if w.matched {
            matched_total += 1;
        }
    }
    report.pair_evaluations = pairs;
    report.matched_particles = matched_total;

    for (e, w) in indices.entries().iter().zip(&work) {
        let p = grid
            .resolve_mut(e.reference)
            .expect("indices image references are fresh");
        p.weight = w.new_weight;
        if w.matched {
            p.last_match_step = step;
            p.template_unconfirmed = false;
        }
    }
    report
}

/// Template-born positions for a newly matched instance.
#[derive(Debug, Clone)]
pub struct TemplateBirth {
    pub instance_id: InstanceId,
    /// Map-frame positions of the template particles under the matched
    /// transform.
    pub positions: Vec<Point3<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct BirthReport {
    pub measurement_born: usize,
    pub template_born: usize,
    pub discarded: usize,
}

/// Particle birth. Every measurement point spawns `l_b` newborns jittered by
/// the depth-dependent measurement noise, carrying the measurement's ID and
/// weight `w_b`. When a template was matched for a new instance, the template
/// particles are additionally born at their matched positions and all of that
/// instance's newborn weights are diluted to
/// `w_b * M L_b / (M L_b + L_T)`, preserving the instance's birth mass.
/// Newborns are excluded from this step's update and resampling.
pub fn birth(
    grid: &mut VoxelGrid,
    registry: &mut InstanceRegistry,
    measurements: &[MeasurementPoint],
    observed: &[InstanceObservation],
    template_births: &[TemplateBirth],
    params: &FilterParams,
    step: u32,
    rng: &mut impl Rng,
) -> BirthReport {
    let mut report = BirthReport::default();
    let mut by_instance: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (i, z) in measurements.iter().enumerate() {
        by_instance.entry(z.instance_id).or_default().push(i);
    }
    let templates: BTreeMap<InstanceId, &TemplateBirth> = template_births
        .iter()
        .map(|t| (t.instance_id, t))
        .collect();

    for (&id, meas_idx) in &by_instance {
        if !registry.contains(id) {
            let (label, movable) = observed
                .iter()
                .find(|o| o.instance_id == id)
                .map(|o| (o.semantic_label, o.movable))
                .unwrap_or((0, false));
            registry.observe(id, label, movable, step);
        }
        let m = meas_idx.len() as f64;
        let template = templates.get(&id);
        let l_t = template.map_or(0, |t| t.positions.len()) as f64;
        let birth_mass = params.w_b * m * params.l_b as f64;
        let weight = if l_t > 0.0 {
            birth_mass / (m * params.l_b as f64 + l_t)
        } else {
            params.w_b
        };
        for &zi in meas_idx {
            let z = &measurements[zi];
            let normal = Normal::new(0.0, z.sigma).expect("positive sigma");
            for _ in 0..params.l_b {
                let jitter = Vector3::new(
                    normal.sample(rng),
                    normal.sample(rng),
                    normal.sample(rng),
                );
                let p = Particle::new(z.position + jitter, id, weight, step);
                match grid.insert_particle(p, step, rng) {
                    InsertOutcome::Accepted(_) | InsertOutcome::ResampledThenAccepted(_) => {
                        report.measurement_born += 1
                    }
                    InsertOutcome::Discarded(_) => report.discarded += 1,
                }
            }
        }
        if let Some(t) = template {
            for pos in &t.positions {
                let mut p = Particle::new(*pos, id, weight, step);
                p.template_unconfirmed = true;
                match grid.insert_particle(p, step, rng) {
                    InsertOutcome::Accepted(_) | InsertOutcome::ResampledThenAccepted(_) => {
                        report.template_born += 1
                    }
                    InsertOutcome::Discarded(_) => report.discarded += 1,
                }
            }
        }
    }
    report
}

/// Weight-proportional halving of one cell; preserves the cell's weight sum.
pub fn resample_cell(grid: &mut VoxelGrid, cell: u32, rng: &mut impl Rng) {
    grid.resample_cell_protected(cell, None, rng);
}

/// Resamples every allocated cell (used to verify that the map estimate is
/// invariant to when resampling fires).
pub fn force_resample_all(grid: &mut VoxelGrid, rng: &mut impl Rng) {
    let cells: Vec<u32> = grid.iter_cells().map(|(c, _)| c).collect();
    for cell in cells {
        grid.resample_cell_protected(cell, None, rng);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelStatus {
    Occupied,
    /// Contains unconfirmed template-born particles but is below the
    /// occupancy threshold.
    Speculative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelLabel {
    pub status: VoxelStatus,
    pub instance_id: InstanceId,
    pub semantic_label: u32,
    pub weight: f64,
}

/// The queryable map output: occupancy, instance and semantic decision per
/// voxel, on the global voxel lattice.
#[derive(Debug, Clone, Default)]
pub struct LabeledVoxelMap {
    pub l_voxel: f64,
    /// Sorted by voxel coordinate.
    pub voxels: Vec<([i64; 3], VoxelLabel)>,
}

impl LabeledVoxelMap {
    pub fn get(&self, gv: [i64; 3]) -> Option<&VoxelLabel> {
        self.voxels
            .binary_search_by(|(v, _)| v.cmp(&gv))
            .ok()
            .map(|i| &self.voxels[i].1)
    }

    pub fn occupied(&self) -> impl Iterator<Item = (&[i64; 3], &VoxelLabel)> {
        self.voxels
            .iter()
            .filter(|(_, l)| l.status == VoxelStatus::Occupied)
            .map(|(v, l)| (v, l))
    }

    pub fn speculative(&self) -> impl Iterator<Item = (&[i64; 3], &VoxelLabel)> {
        self.voxels
            .iter()
            .filter(|(_, l)| l.status == VoxelStatus::Speculative)
            .map(|(v, l)| (v, l))
    }

    pub fn voxel_center(&self, gv: [i64; 3]) -> Point3<f64> {
        Point3::new(
            (gv[0] as f64 + 0.5) * self.l_voxel,
            (gv[1] as f64 + 0.5) * self.l_voxel,
            (gv[2] as f64 + 0.5) * self.l_voxel,
        )
    }

    /// Text export: one record per non-free voxel,
    /// `x y z status instance_id semantic_label` with voxel-center
    /// coordinates in meters.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<(), FilterError> {
        writeln!(w, "# phdmap-map v1")?;
        writeln!(w, "# voxel {}", self.l_voxel)?;
        writeln!(w, "# columns: x y z status instance_id semantic_label")?;
        for (gv, label) in &self.voxels {
            let c = self.voxel_center(*gv);
            let status = match label.status {
                VoxelStatus::Occupied => "occupied",
                VoxelStatus::Speculative => "speculative",
            };
            writeln!(
                w,
                "{:.6} {:.6} {:.6} {} {} {}",
                c.x, c.y, c.z, status, label.instance_id, label.semantic_label
            )?;
        }
        Ok(())
    }

    /// Binary export mirroring the particle snapshot layout: text header,
    /// `---`, then per voxel: coordinates (3 x i64), status (u8),
    /// instance_id (u32), semantic_label (u32), weight (f64), little-endian.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<(), FilterError> {
        writeln!(w, "phdmap-map-bin v1")?;
        writeln!(w, "voxel {}", self.l_voxel)?;
        writeln!(w, "count {}", self.voxels.len())?;
        writeln!(w, "---")?;
        for (gv, label) in &self.voxels {
            for c in gv {
                w.write_all(&c.to_le_bytes())?;
            }
            w.write_all(&[match label.status {
                VoxelStatus::Occupied => 1u8,
                VoxelStatus::Speculative => 2u8,
            }])?;
            w.write_all(&label.instance_id.to_le_bytes())?;
            w.write_all(&label.semantic_label.to_le_bytes())?;
            w.write_all(&label.weight.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses the text export format.
    pub fn read_text(content: &str) -> Result<Self, FilterError> {
        let mut l_voxel = None;
        let mut voxels = Vec::new();
        for line in content.lines() {
            if let Some(rest) = line.strip_prefix("# voxel ") {
                l_voxel = rest.trim().parse::<f64>().ok();
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 {
                return Err(FilterError::BadMapFile(format!(
                    "expected 6 columns, got {}: {line:?}",
                    parts.len()
                )));
            }
            let l = l_voxel.ok_or_else(|| {
                FilterError::BadMapFile("voxel size header missing before records".into())
            })?;
            let coord = |s: &str| -> Result<i64, FilterError> {
                let x: f64 = s
                    .parse()
                    .map_err(|_| FilterError::BadMapFile(format!("bad number {s:?}")))?;
                Ok((x / l - 0.5).round() as i64)
            };
            let status = match parts[3] {
                "occupied" => VoxelStatus::Occupied,
                "speculative" => VoxelStatus::Speculative,
                other => {
                    return Err(FilterError::BadMapFile(format!("bad status {other:?}")))
                }
            };
            let parse_u32 = |s: &str| -> Result<u32, FilterError> {
                s.parse()
                    .map_err(|_| FilterError::BadMapFile(format!("bad id {s:?}")))
            };
            voxels.push((
                [coord(parts[0])?, coord(parts[1])?, coord(parts[2])?],
                VoxelLabel {
                    status,
                    instance_id: parse_u32(parts[4])?,
                    semantic_label: parse_u32(parts[5])?,
                    weight: 0.0,
                },
            ));
        }
        let l_voxel =
            l_voxel.ok_or_else(|| FilterError::BadMapFile("missing voxel header".into()))?;
        voxels.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self { l_voxel, voxels })
    }
}

/// Per-voxel map estimation: a voxel is occupied when its weight sum reaches
/// the occupancy threshold; its instance is the per-ID argmax (ties to the
/// smaller ID) and the semantic label comes from the registry. Voxels below
/// the threshold holding unconfirmed template-born particles are marked
/// speculative.
pub fn estimate_map(
    grid: &VoxelGrid,
    registry: &InstanceRegistry,
    params: &FilterParams,
) -> LabeledVoxelMap {
    let mut voxels = Vec::new();
    for (cell, gv) in grid.iter_cells() {
        let mut total = 0.0f64;
        let mut by_id: BTreeMap<InstanceId, f64> = BTreeMap::new();
        let mut speculative = false;
        for p in grid.slots(cell).iter().filter(|p| p.valid) {
            total += p.weight;
            *by_id.entry(p.instance_id).or_insert(0.0) += p.weight;
            speculative |= p.template_unconfirmed;
        }
        if total >= params.thr_occ {
            let (&best_id, &best_w) = by_id
                .iter()
                .max_by(|a, b| {
                    // Strictly greater wins; ties keep the earlier (smaller) ID.
                    a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0))
                })
                .expect("occupied voxel has at least one particle");
            let semantic_label = registry.get(best_id).map_or(0, |r| r.semantic_label);
            let _ = best_w;
            voxels.push((
                gv,
                VoxelLabel {
                    status: VoxelStatus::Occupied,
                    instance_id: best_id,
                    semantic_label,
                    weight: total,
                },
            ));
        } else if speculative {
            let (&best_id, _) = by_id
                .iter()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
                .expect("speculative voxel has at least one particle");
            let semantic_label = registry.get(best_id).map_or(0, |r| r.semantic_label);
            voxels.push((
                gv,
                VoxelLabel {
                    status: VoxelStatus::Speculative,
                    instance_id: best_id,
                    semantic_label,
                    weight: total,
                },
            ));
        }
    }
    voxels.sort_by(|a, b| a.0.cmp(&b.0));
    LabeledVoxelMap {
        l_voxel: grid.l_voxel(),
        voxels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::DepthImage;
    use crate::geometry::{CameraModel, Pose};
    use crate::rng::{derive, Stream};
    use crate::visibility::{activation_box, activation_radius, build_indices_image};

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 320.0, 240.0, 640, 480, 50.0).unwrap()
    }

    fn make_measurement(
        cam: &CameraModel,
        params: &FilterParams,
        pos: Point3<f64>,
        id: InstanceId,
    ) -> MeasurementPoint {
        // Camera at origin looking +z: map frame == camera frame.
        let (u, v) = cam.project(&pos).expect("measurement must be in view");
        let sigma = params.sigma_at(pos.z);
        let l = activation_radius(sigma, params.activation_epsilon);
        MeasurementPoint {
            pixel: (u.floor() as u32, v.floor() as u32),
            instance_id: id,
            position: pos,
            depth: pos.z,
            sigma,
            activation: activation_box(cam, &pos, l, params.bbox_dilation_px),
        }
    }

    #[test]
    fn forgetting_examples() {
        let p = FilterParams::default();
        assert_eq!(forgetting(0, &p), 1.0);
        assert!((forgetting(5, &p) - (-5.0f64).exp()).abs() < 1e-15);
        assert!((forgetting(5, &p) - 6.7379e-3).abs() < 1e-6);
        assert_eq!(forgetting(6, &p), 0.0);
    }

    #[test]
    fn id_transition_examples() {
        let mut p = FilterParams::default();
        assert_eq!(id_transition(7, 7, &p), 1.0);
        assert_eq!(id_transition(7, 9, &p), 0.5);
        p.p_tr = 0.0;
        assert_eq!(id_transition(7, 9, &p), 0.0);
    }

    fn harness_grid(params: &FilterParams) -> VoxelGrid {
        VoxelGrid::new(
            6,
            0.2,
            params.cell_capacity as usize,
            &Point3::new(0.0, 0.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn no_measurements_decay_visible_weights() {
        let cam = cam();
        let params = FilterParams::default();
        let mut grid = harness_grid(&params);
        let mut rng = derive(31, Stream::Test, 0);
        grid.insert_particle(
            Particle::new(Point3::new(0.3, 0.2, 3.0), 4, 0.5, 0),
            0,
            &mut rng,
        );
        let depth = DepthImage::filled(cam.width, cam.height, f32::INFINITY);
        let pose = Pose::new(RigidTransform::identity(), 1);
        let indices = build_indices_image(&grid, &cam, &pose, &depth);
        assert_eq!(indices.entries().len(), 1);
        update(&mut grid, &indices, &[], &params, 1);
        let w = grid.weight_sum(grid.global_voxel_of(&Point3::new(0.3, 0.2, 3.0)));
        assert!((w - 0.01).abs() < 1e-15, "got {w}");
    }

    #[test]
    fn single_particle_at_measurement_matches_scalar_oracle() {
        let cam = cam();
        let mut params = FilterParams::default();
        // (w, sigma, kappa, p_d) = (0.001, 0.05, 0.01, 0.98) with sigma fixed
        // via a depth-independent noise model.
        params.sigma_a = 0.0;
        params.sigma_b = 0.05;
        params.update_mode = UpdateMode::If;
        let mut grid = harness_grid(&params);
        let mut rng = derive(32, Stream::Test, 0);
        let pos = Point3::new(0.0, 0.0, 3.0);
        grid.insert_particle(Particle::new(pos, 4, 0.001, 0), 0, &mut rng);
        let depth = DepthImage::filled(cam.width, cam.height, f32::INFINITY);
        let pose = Pose::new(RigidTransform::identity(), 1);
        let indices = build_indices_image(&grid, &cam, &pose, &depth);
        let z = make_measurement(&cam, &params, pos, 4);
        update(&mut grid, &indices, &[z], &params, 1);

        let (w, sigma, kappa, p_d) = (0.001f64, 0.05f64, 0.01f64, 0.98f64);
        let g0 = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-1.5);
        let expected = (1.0 - p_d + p_d * g0 / (kappa + p_d * w * g0)) * w;
        let got = grid.weight_sum(grid.global_voxel_of(&pos));
        assert!(
            (got - expected).abs() < 1e-12 * expected,
            "got {got}, expected {expected}"
        );
        // The particle was matched: last_match_step advanced.
        let (_, p) = grid.iter_particles_ordered().next().unwrap();
        assert_eq!(p.last_match_step, 1);
    }

    #[test]
    fn cf_truncated_forgetting_ignores_old_mismatched_ids() {
        let cam = cam();
        let params = FilterParams::default(); // CF, horizon 5
        let mut grid = harness_grid(&params);
        let mut rng = derive(33, Stream::Test, 0);
        let pos = Point3::new(0.0, 0.0, 3.0);
        // Particle last matched at step 0; update happens at step 6 (delta 6 > 5).
        grid.insert_particle(Particle::new(pos, 4, 0.5, 0), 0, &mut rng);
        let depth = DepthImage::filled(cam.width, cam.height, f32::INFINITY);
        let pose = Pose::new(RigidTransform::identity(), 6);
        let indices = build_indices_image(&grid, &cam, &pose, &depth);
        let z = make_measurement(&cam, &params, pos, 9); // different ID
        update(&mut grid, &indices, &[z], &params, 6);
        let w = grid.weight_sum(grid.global_voxel_of(&pos));
        assert!(((0.02 * 0.5) - w).abs() < 1e-15, "got {w}");
    }

    /// Brute-force evaluation of the update equations over all
    /// (particle, measurement) pairs, written independently of the
    /// production path.
    fn full_sum_oracle(
        entries: &[(Point3<f64>, InstanceId, f64, u32)],
        measurements: &[(Point3<f64>, InstanceId, f64)],
        params: &FilterParams,
        step: u32,
    ) -> Vec<f64> {
        let g = |z: &(Point3<f64>, InstanceId, f64), x: &(Point3<f64>, InstanceId, f64, u32)| {
            let sigma2 = z.2 * z.2;
            let norm = (2.0 * std::f64::consts::PI * sigma2).powf(-1.5);
            let gp = norm * (-(z.0 - x.0).norm_squared() / (2.0 * sigma2)).exp();
            let factor = match params.update_mode {
                UpdateMode::If => {
                    if z.1 == x.1 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UpdateMode::Cf => {
                    let tr = if z.1 == x.1 { 1.0 } else { params.p_tr };
                    let fgt = if params.forgetting_enabled {
                        let dk = step - x.3;
                        if dk > params.forgetting_horizon {
                            0.0
                        } else {
                            (-(dk as f64) / params.forgetting_s).exp()
                        }
                    } else {
                        1.0
                    };
                    tr * fgt
                }
            };
            factor * gp
        };
        let c: Vec<f64> = measurements
            .iter()
            .map(|z| {
                entries
                    .iter()
                    .map(|x| params.p_d * x.2 * g(z, x))
                    .sum::<f64>()
            })
            .collect();
        entries
            .iter()
            .map(|x| {
                let sum: f64 = measurements
                    .iter()
                    .zip(&c)
                    .map(|(z, cz)| params.p_d * g(z, x) / (params.kappa + cz))
                    .sum();
                (1.0 - params.p_d + sum) * x.2
            })
            .collect()
    }

    #[test]
    fn update_matches_bruteforce_oracle_on_micro_scene() {
        let cam = cam();
        let mut params = FilterParams::default();
        params.activation_epsilon = 1e-16; // widen boxes so nothing is excluded
        let mut grid = harness_grid(&params);
        let mut rng = derive(34, Stream::Test, 0);
        let particle_spec = [
            (Point3::new(0.02, 0.01, 3.0), 4u32, 0.4f64, 6u32),
            (Point3::new(-0.05, 0.02, 3.05), 4, 0.2, 7),
            (Point3::new(0.04, -0.03, 2.95), 9, 0.6, 5),
        ];
        for (pos, id, w, lm) in particle_spec {
            let mut p = Particle::new(pos, id, w, 0);
            p.last_match_step = lm;
            grid.insert_particle(p, 0, &mut rng);
        }
        let depth = DepthImage::filled(cam.width, cam.height, f32::INFINITY);
        let pose = Pose::new(RigidTransform::identity(), 8);
        let indices = build_indices_image(&grid, &cam, &pose, &depth);
        let measurements = vec![
            make_measurement(&cam, &params, Point3::new(0.0, 0.0, 3.0), 4),
            make_measurement(&cam, &params, Point3::new(0.05, 0.0, 3.0), 9),
        ];
        update(&mut grid, &indices, &measurements, &params, 8);

        let oracle_in: Vec<(Point3<f64>, InstanceId, f64, u32)> = particle_spec
            .iter()
            .map(|(p, id, w, lm)| (*p, *id, *w, *lm))
            .collect();
        let meas_in: Vec<(Point3<f64>, InstanceId, f64)> = measurements
            .iter()
            .map(|z| (z.position, z.instance_id, z.sigma))
            .collect();
        let expected = full_sum_oracle(&oracle_in, &meas_in, &params, 8);
        let key = |p: &Point3<f64>| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        let mut got: Vec<(Point3<f64>, f64)> = grid
            .iter_particles_ordered()
            .map(|(_, p)| (p.position, p.weight))
            .collect();
        got.sort_by_key(|a| key(&a.0));
        let mut want: Vec<(Point3<f64>, f64)> = oracle_in
            .iter()
            .zip(&expected)
            .map(|(x, w)| (x.0, *w))
            .collect();
        want.sort_by_key(|a| key(&a.0));
        for ((_, gw), (_, ww)) in got.iter().zip(&want) {
            assert!(
                (gw - ww).abs() <= 1e-12 * ww.abs().max(1e-30),
                "got {gw}, want {ww}"
            );
        }
    }

    #[test]
    fn repeated_empty_updates_follow_closed_form() {
        let cam = cam();
        let mut params = FilterParams::default();
        params.p_s = 0.9;
        let mut grid = harness_grid(&params);
        let mut registry = InstanceRegistry::default();
        let mut rng = derive(35, Stream::Test, 0);
        let pos = Point3::new(0.1, 0.0, 2.0);
        let w0 = 0.7;
        grid.insert_particle(Particle::new(pos, 3, w0, 0), 0, &mut rng);
        registry.observe(3, 1, false, 0);
        let depth = DepthImage::filled(cam.width, cam.height, f32::INFINITY);
        let n = 4;
        for k in 1..=n {
            let mut prng = derive(35, Stream::Predict, k as u64);
            predict(&mut grid, &mut registry, &[], &params, k, &mut prng);
            let pose = Pose::new(RigidTransform::identity(), k);
            let indices = build_indices_image(&grid, &cam, &pose, &depth);
            update(&mut grid, &indices, &[], &params, k);
        }
        let expected = w0 * (1.0 - params.p_d).powi(n as i32) * params.p_s.powi(n as i32);
        let got = grid.weight_sum(grid.global_voxel_of(&pos));
        assert!(
            (got - expected).abs() <= 1e-12 * expected,
            "got {got}, want {expected}"
        );
    }

    #[test]
    fn birth_spawns_l_b_newborns_with_w_b() {
        let cam = cam();
        let params = FilterParams::default();
        let mut grid = harness_grid(&params);
        let mut registry = InstanceRegistry::default();
        let mut rng = derive(36, Stream::Test, 0);
        let z = make_measurement(&cam, &params, Point3::new(0.0, 0.0, 4.0), 7);
        let report = birth(
            &mut grid,
            &mut registry,
            &[z],
            &[],
            &[],
            &params,
            3,
            &mut rng,
        );
        assert_eq!(report.measurement_born, 5);
        assert_eq!(grid.total_live_particles(), 5);
        for (_, p) in grid.iter_particles_ordered() {
            assert_eq!(p.weight, 0.001);
            assert_eq!(p.instance_id, 7);
            assert_eq!(p.born_step, 3);
            assert!(!p.template_unconfirmed);
        }
        // No measurements -> no newborns.
        let report = birth(
            &mut grid,
            &mut registry,
            &[],
            &[],
            &[],
            &params,
            4,
            &mut rng,
        );
        assert_eq!(report.measurement_born + report.template_born, 0);
    }

    #[test]
    fn template_birth_dilutes_weights() {
        let cam = cam();
        let mut params = FilterParams::default();
        params.cell_capacity = 255; // avoid capacity effects in this check
        let mut grid = harness_grid(&params);
        let mut registry = InstanceRegistry::default();
        let mut rng = derive(37, Stream::Test, 0);
        // 10 measurements, 200 template particles: weight = v_b / 250 with
        // v_b = w_b * M * L_b.
        let mut measurements = Vec::new();
        for i in 0..10 {
            measurements.push(make_measurement(
                &cam,
                &params,
                Point3::new(i as f64 * 0.3 - 1.5, 0.0, 4.0),
                7,
            ));
        }
        let template = TemplateBirth {
            instance_id: 7,
            positions: (0..200)
                .map(|i| Point3::new((i % 20) as f64 * 0.1 - 1.0, 0.5, 4.0 + (i / 20) as f64 * 0.1))
                .collect(),
        };
        let report = birth(
            &mut grid,
            &mut registry,
            &measurements,
            &[],
            &[template],
            &params,
            0,
            &mut rng,
        );
        assert_eq!(report.measurement_born, 50);
        assert_eq!(report.template_born, 200);
        let v_b = params.w_b * 10.0 * 5.0;
        let expected = v_b / 250.0;
        let mut saw_template = false;
        for (_, p) in grid.iter_particles_ordered() {
            assert!((p.weight - expected).abs() < 1e-15);
            saw_template |= p.template_unconfirmed;
        }
        assert!(saw_template);
    }

    #[test]
    fn resample_preserves_weight_sum_and_degenerate_singleton() {
        let params = FilterParams::default();
        let mut grid = harness_grid(&params);
        let mut rng = derive(38, Stream::Test, 0);
        for i in 0..8 {
            grid.insert_particle(
                Particle::new(Point3::new(0.05, 0.05, 0.05), 1, 0.1 + 0.05 * i as f64, 0),
                0,
                &mut rng,
            );
        }
        let cell = grid.cell_at([0, 0, 0]).unwrap();
        let before = grid.weight_sum([0, 0, 0]);
        resample_cell(&mut grid, cell, &mut rng);
        let after = grid.weight_sum([0, 0, 0]);
        assert!(((after - before) / before).abs() <= 1e-12);
        assert_eq!(grid.live_count(cell), 4);

        // Singleton: survives unchanged.
        let mut grid2 = harness_grid(&params);
        grid2.insert_particle(
            Particle::new(Point3::new(0.05, 0.05, 0.05), 1, 0.42, 0),
            0,
            &mut rng,
        );
        let cell2 = grid2.cell_at([0, 0, 0]).unwrap();
        resample_cell(&mut grid2, cell2, &mut rng);
        assert_eq!(grid2.live_count(cell2), 1);
        assert_eq!(grid2.weight_sum([0, 0, 0]), 0.42);
    }

    #[test]
    fn resample_survival_is_weight_proportional() {
        // One heavy particle (0.9) among seven light (0.1): under 4 draws
        // with replacement, P(heavy survives) = 1 - (1 - 0.9/1.6)^4.
        let params = FilterParams::default();
        let p_survive = 1.0 - (1.0f64 - 0.9 / 1.6).powi(4);
        let trials = 10_000;
        let mut survived = 0;
        let mut rng = derive(39, Stream::Test, 0);
        for _ in 0..trials {
            let mut grid = harness_grid(&params);
            grid.insert_particle(
                Particle::new(Point3::new(0.05, 0.05, 0.05), 99, 0.9, 0),
                0,
                &mut rng,
            );
            for _ in 0..7 {
                grid.insert_particle(
                    Particle::new(Point3::new(0.05, 0.05, 0.05), 1, 0.1, 0),
                    0,
                    &mut rng,
                );
            }
            let cell = grid.cell_at([0, 0, 0]).unwrap();
            resample_cell(&mut grid, cell, &mut rng);
            if grid
                .slots(cell)
                .iter()
                .any(|p| p.valid && p.instance_id == 99)
            {
                survived += 1;
            }
        }
        // Binomial 99% CI around the expected frequency.
        let mean = trials as f64 * p_survive;
        let sd = (trials as f64 * p_survive * (1.0 - p_survive)).sqrt();
        assert!(
            (survived as f64 - mean).abs() < 2.58 * sd + 1.0,
            "survived {survived}, expected {mean:.1} +- {:.1}",
            2.58 * sd
        );
    }

    #[test]
    fn estimate_map_examples() {
        let params = FilterParams::default();
        let mut grid = harness_grid(&params);
        let mut registry = InstanceRegistry::default();
        registry.observe(3, 11, true, 0);
        registry.observe(8, 12, true, 0);
        let mut rng = derive(40, Stream::Test, 0);
        // Voxel A: {0.5 id 3, 0.4 id 8} -> occupied, id 3.
        grid.insert_particle(
            Particle::new(Point3::new(0.05, 0.05, 0.05), 3, 0.5, 0),
            0,
            &mut rng,
        );
        grid.insert_particle(
            Particle::new(Point3::new(0.15, 0.05, 0.05), 8, 0.4, 0),
            0,
            &mut rng,
        );
        // Voxel B: total 0.79 -> free.
        grid.insert_particle(
            Particle::new(Point3::new(1.05, 0.05, 0.05), 3, 0.79, 0),
            0,
            &mut rng,
        );
        let map = estimate_map(&grid, &registry, &params);
        assert_eq!(map.voxels.len(), 1);
        let (gv, label) = &map.voxels[0];
        assert_eq!(*gv, [0, 0, 0]);
        assert_eq!(label.status, VoxelStatus::Occupied);
        assert_eq!(label.instance_id, 3);
        assert_eq!(label.semantic_label, 11);
        assert!((label.weight - 0.9).abs() < 1e-12);
        assert!(map.get([5, 0, 0]).is_none());
    }

    #[test]
    fn estimate_map_marks_unconfirmed_template_voxels_speculative() {
        let params = FilterParams::default();
        let mut grid = harness_grid(&params);
        let registry = InstanceRegistry::default();
        let mut rng = derive(41, Stream::Test, 0);
        let mut p = Particle::new(Point3::new(0.05, 0.05, 0.05), 3, 0.001, 0);
        p.template_unconfirmed = true;
        grid.insert_particle(p, 0, &mut rng);
        let map = estimate_map(&grid, &registry, &params);
        assert_eq!(map.voxels.len(), 1);
        assert_eq!(map.voxels[0].1.status, VoxelStatus::Speculative);
    }

    #[test]
    fn map_text_roundtrip() {
        let params = FilterParams::default();
        let mut grid = harness_grid(&params);
        let mut registry = InstanceRegistry::default();
        registry.observe(3, 11, true, 0);
        let mut rng = derive(42, Stream::Test, 0);
        grid.insert_particle(
            Particle::new(Point3::new(0.05, -0.33, 2.1), 3, 1.5, 0),
            0,
            &mut rng,
        );
        let map = estimate_map(&grid, &registry, &params);
        let mut buf = Vec::new();
        map.write_text(&mut buf).unwrap();
        let parsed = LabeledVoxelMap::read_text(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed.voxels.len(), map.voxels.len());
        assert_eq!(parsed.voxels[0].0, map.voxels[0].0);
        assert_eq!(parsed.voxels[0].1.instance_id, 3);
        assert_eq!(parsed.voxels[0].1.semantic_label, 11);
    }

    #[test]
    fn predict_applies_transform_and_extrapolates_when_occluded() {
        let mut params = FilterParams::default();
        params.q_var = 0.0;
        let mut grid = harness_grid(&params);
        let mut registry = InstanceRegistry::default();
        let mut rng = derive(43, Stream::Test, 0);
        let start = Point3::new(0.05, 0.05, 3.05);
        grid.insert_particle(Particle::new(start, 5, 1.0, 0), 0, &mut rng);
        registry.observe(5, 2, true, 0);
        registry.compact(&grid);
        let v = Vector3::new(0.4, 0.0, 0.0); // exactly two voxels at 0.2 m
        let obs = InstanceObservation {
            instance_id: 5,
            semantic_label: 2,
            movable: true,
            transform: Some(RigidTransform::from_translation(v)),
        };
        // Two observed frames with constant translation.
        for k in 1..=2 {
            let mut prng = derive(43, Stream::Predict, k as u64);
            predict(
                &mut grid,
                &mut registry,
                std::slice::from_ref(&obs),
                &params,
                k,
                &mut prng,
            );
            registry.compact(&grid);
        }
        let expect2 = Point3::new(0.85, 0.05, 3.05);
        let (_, p) = grid.iter_particles_ordered().next().unwrap();
        assert!((p.position - expect2).norm() < 1e-12);
        assert_eq!(
            grid.global_voxel_of(&p.position),
            [4, 0, 15],
            "two +2 voxel shifts from [0,0,15]"
        );
        // Occluded frame: constant-velocity extrapolation continues the motion.
        let mut prng = derive(43, Stream::Predict, 3);
        let report = predict(&mut grid, &mut registry, &[], &params, 3, &mut prng);
        assert_eq!(report.extrapolated, vec![5]);
        let (_, p) = grid.iter_particles_ordered().next().unwrap();
        assert!((p.position - Point3::new(1.25, 0.05, 3.05)).norm() < 1e-12);
    }

    #[test]
    fn predict_missing_history_uses_identity_and_reports() {
        let mut params = FilterParams::default();
        params.q_var = 0.0;
        let mut grid = harness_grid(&params);
        let mut registry = InstanceRegistry::default();
        let mut rng = derive(44, Stream::Test, 0);
        grid.insert_particle(
            Particle::new(Point3::new(0.05, 0.05, 3.05), 5, 1.0, 0),
            0,
            &mut rng,
        );
        registry.observe(5, 2, true, 0);
        registry.compact(&grid);
        let before: Vec<Point3<f64>> = grid
            .iter_particles_ordered()
            .map(|(_, p)| p.position)
            .collect();
        let mut prng = derive(44, Stream::Predict, 1);
        let report = predict(&mut grid, &mut registry, &[], &params, 1, &mut prng);
        assert_eq!(report.missing_history, vec![5]);
        let after: Vec<Point3<f64>> = grid
            .iter_particles_ordered()
            .map(|(_, p)| p.position)
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn last_match_step_is_monotone_and_bounded() {
        let cam = cam();
        let mut params = FilterParams::default();
        params.sigma_a = 0.0;
        params.sigma_b = 0.05;
        let mut grid = harness_grid(&params);
        let mut rng = derive(45, Stream::Test, 0);
        let pos = Point3::new(0.0, 0.0, 3.0);
        grid.insert_particle(Particle::new(pos, 4, 0.5, 0), 0, &mut rng);
        let depth = DepthImage::filled(cam.width, cam.height, f32::INFINITY);
        let mut prev = 0u32;
        for k in 1..=6 {
            let pose = Pose::new(RigidTransform::identity(), k);
            let indices = build_indices_image(&grid, &cam, &pose, &depth);
            // Alternate matching and non-matching measurements.
            let id = if k % 2 == 0 { 4 } else { 9 };
            let z = make_measurement(&cam, &params, pos, id);
            update(&mut grid, &indices, &[z], &params, k);
            let (_, p) = grid.iter_particles_ordered().next().unwrap();
            assert!(p.last_match_step >= prev);
            assert!(p.last_match_step <= k);
            prev = p.last_match_step;
        }
    }
}
