//! Per-frame visibility: the update-indices image (pixel -> visible particle
//! list) and per-measurement activation bounding boxes.
//!
//! Each pixel plays the role of a thin viewing frustum: particles projecting
//! into it and lying in front of the measured surface are collected, and each
//! measurement only updates particles within its activation box, the pixel
//! rectangle bounding the projection of the sphere where the measurement's
//! position likelihood is non-negligible.

use std::collections::VecDeque;

use nalgebra::Point3;

use crate::filter::FilterParams;
use crate::frame::{MeasurementFrame, RawMeasurement};
use crate::geometry::{CameraModel, Pose, RigidTransform};
use crate::grid::{InstanceId, ParticleRef, VoxelGrid};

/// One visible particle stored at its projected pixel.
#[derive(Debug, Clone, Copy)]
pub struct ParticleEntry {
    pub reference: ParticleRef,
    pub pixel: (u32, u32),
    /// Map-frame position.
    pub position: Point3<f64>,
    /// Camera-frame depth (z).
    pub depth: f64,
}

/// Per-pixel lists of visible particles for one frame, with the effective
/// per-pixel measurement depth used for the occlusion test.
#[derive(Debug, Clone)]
pub struct UpdateIndicesImage {
    pub step: u32,
    pub width: u32,
    pub height: u32,
    entries: Vec<ParticleEntry>,
    offsets: Vec<u32>,
    depth_limit: Vec<f32>,
}

impl UpdateIndicesImage {
    pub fn entries(&self) -> &[ParticleEntry] {
        &self.entries
    }

    pub fn entries_at(&self, u: u32, v: u32) -> &[ParticleEntry] {
        let p = v as usize * self.width as usize + u as usize;
        &self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }

    pub fn depth_limit_at(&self, u: u32, v: u32) -> f32 {
        self.depth_limit[v as usize * self.width as usize + u as usize]
    }

    /// Text matrix of per-pixel particle counts, one image row per line.
    pub fn dump_counts(&self) -> String {
        let mut out = String::new();
        for v in 0..self.height {
            let mut row = Vec::with_capacity(self.width as usize);
            for u in 0..self.width {
                row.push(self.entries_at(u, v).len().to_string());
            }
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Occlusion slack: half a voxel diagonal, so particles lying on the measured
/// surface are not self-occluded.
pub fn occlusion_slack(l_voxel: f64) -> f64 {
    0.5 * l_voxel * 3.0f64.sqrt()
}

/// Builds the update-indices image: a breadth-first search from the sensor
/// voxel over in-FOV voxels, projecting each voxel's particles and keeping
/// those in front of the measured depth at their pixel.
///
/// Invalid-depth pixels are treated as depth = max sensing range, so
/// everything in front of them is visible.
pub fn build_indices_image(
    grid: &VoxelGrid,
    cam: &CameraModel,
    pose: &Pose,
    depth: &crate::frame::DepthImage,
) -> UpdateIndicesImage {
    assert_eq!(depth.width, cam.width);
    assert_eq!(depth.height, cam.height);
    let map_to_cam = pose.map_to_cam();
    let slack = occlusion_slack(grid.l_voxel());
    let max_range = cam.max_range;

    let depth_limit: Vec<f32> = depth
        .data
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                (d as f64).min(max_range) as f32
            } else {
                max_range as f32
            }
        })
        .collect();

    let mut entries: Vec<ParticleEntry> = Vec::new();
    let side = grid.side();
    let mut visited = vec![false; (side * side * side) as usize];
    let start = grid.global_voxel_of(&pose.position());
    let mut queue: VecDeque<[i64; 3]> = VecDeque::new();
    if grid.in_range(start) {
        visited[grid.storage_index(start) as usize] = true;
        queue.push_back(start);
    }
    // BFS range bound: voxels whose center is farther than this cannot hold
    // visible particles.
    let range_bound = max_range + slack + grid.l_voxel() * 3.0f64.sqrt();
    let cam_pos = pose.position();

    while let Some(gv) = queue.pop_front() {
        // Collect visible particles of this voxel.
        if let Some(cell) = grid.cell_at(gv) {
            let generation = grid.cell_generation(cell);
            for (slot, p) in grid.slots(cell).iter().enumerate() {
                if !p.valid {
                    continue;
                }
                let p_cam = map_to_cam.apply(&p.position);
                if let Some((u, v)) = cam.project(&p_cam) {
                    let (pu, pv) = (u.floor() as u32, v.floor() as u32);
                    let limit =
                        depth_limit[pv as usize * cam.width as usize + pu as usize] as f64;
                    if p_cam.z < limit + slack {
                        entries.push(ParticleEntry {
                            reference: ParticleRef {
                                cell,
                                generation,
                                slot: slot as u8,
                            },
                            pixel: (pu, pv),
                            position: p.position,
                            depth: p_cam.z,
                        });
                    }
                }
            }
        }
        for (axis, delta) in [(0, 1i64), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)] {
            let mut n = gv;
            n[axis] += delta;
            if !grid.in_range(n) {
                continue;
            }
            let storage = grid.storage_index(n) as usize;
            if visited[storage] {
                continue;
            }
            let center = grid.voxel_center(n);
            if (center - cam_pos).norm() > range_bound {
                continue;
            }
            if voxel_in_fov(cam, &map_to_cam, grid, n) {
                visited[storage] = true;
                queue.push_back(n);
            }
        }
    }

    // Bucket entries by pixel (counting sort keeps construction O(n)).
    let pixel_count = cam.pixel_count();
    let mut offsets = vec![0u32; pixel_count + 1];
    for e in &entries {
        let p = e.pixel.1 as usize * cam.width as usize + e.pixel.0 as usize;
        offsets[p + 1] += 1;
    }
    for i in 0..pixel_count {
        offsets[i + 1] += offsets[i];
    }
    let mut sorted = entries.clone();
    let mut cursor = offsets.clone();
    for e in entries {
        let p = e.pixel.1 as usize * cam.width as usize + e.pixel.0 as usize;
        sorted[cursor[p] as usize] = e;
        cursor[p] += 1;
    }

    UpdateIndicesImage {
        step: pose.step,
        width: cam.width,
        height: cam.height,
        entries: sorted,
        offsets,
        depth_limit,
    }
}

/// Conservative frustum membership of a voxel from its 8 corners: entirely
/// behind the camera is out; straddling the near plane is in; otherwise the
/// corner projections' bounding rectangle must overlap the image.
fn voxel_in_fov(
    cam: &CameraModel,
    map_to_cam: &RigidTransform,
    grid: &VoxelGrid,
    gv: [i64; 3],
) -> bool {
    let l = grid.l_voxel();
    let mut n_front = 0;
    let (mut u_min, mut u_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut v_min, mut v_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let corner = Point3::new(
                    (gv[0] + dx) as f64 * l,
                    (gv[1] + dy) as f64 * l,
                    (gv[2] + dz) as f64 * l,
                );
                let c = map_to_cam.apply(&corner);
                if c.z > 0.0 {
                    n_front += 1;
                    let u = cam.focal * c.x / c.z + cam.cx;
                    let v = cam.focal * c.y / c.z + cam.cy;
                    u_min = u_min.min(u);
                    u_max = u_max.max(u);
                    v_min = v_min.min(v);
                    v_max = v_max.max(v);
                }
            }
        }
    }
    match n_front {
        0 => false,
        8 => u_max >= 0.0 && u_min < cam.width as f64 && v_max >= 0.0 && v_min < cam.height as f64,
        _ => true,
    }
}

/// Radius of the sphere outside which a measurement's isotropic Gaussian
/// position likelihood with per-axis deviation `sigma` falls below `epsilon`.
/// Returns 0 when even the Gaussian peak is below `epsilon`.
pub fn activation_radius(sigma: f64, epsilon: f64) -> f64 {
    let arg = (2.0 * std::f64::consts::PI).powf(1.5) * sigma.powi(3) * epsilon;
    // A cut at one ulp below 1 absorbs rounding at the peak boundary; the
    // discarded radii are below 1e-4 sigma.
    if arg >= 1.0 - 1e-9 {
        return 0.0;
    }
    (2.0 * sigma * sigma * (1.0 / arg).ln()).sqrt()
}

/// Pixel rectangle bounding the projection of the likelihood-significant
/// sphere around a measurement, dilated and clamped to the image.
#[derive(Debug, Clone, Copy)]
pub struct ActivationBox {
    /// Continuous pre-dilation bounds (u_min, u_max, v_min, v_max), when the
    /// analytic extrema are valid.
    pub analytic: Option<(f64, f64, f64, f64)>,
    /// Inclusive integer pixel bounds after dilation and clamping.
    pub u_lo: u32,
    pub u_hi: u32,
    pub v_lo: u32,
    pub v_hi: u32,
    /// Set when the preconditions failed and the box fell back to the full
    /// image (conservative).
    pub full_image_fallback: bool,
}

impl ActivationBox {
    #[inline]
    pub fn contains(&self, pixel: (u32, u32)) -> bool {
        pixel.0 >= self.u_lo && pixel.0 <= self.u_hi && pixel.1 >= self.v_lo && pixel.1 <= self.v_hi
    }
}

/// Extrema of `(c + l sin a) / (z + l cos a)`, the projected silhouette of a
/// sphere at distance `z` with center offset `c` and radius `l`, valid when
/// `z > l` and `c^2 + z^2 - l^2 >= 0`.
fn silhouette_extrema(c: f64, z: f64, l: f64) -> Option<(f64, f64)> {
    let disc = c * c + z * z - l * l;
    if disc < 0.0 || z <= l {
        return None;
    }
    let root = disc.sqrt();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for sign in [-1.0, 1.0] {
        let alpha = 2.0 * ((c + sign * root) / (z - l)).atan();
        let value = (c + l * alpha.sin()) / (z + l * alpha.cos());
        lo = lo.min(value);
        hi = hi.max(value);
    }
    Some((lo, hi))
}

/// Computes the activation bounding box of a camera-frame measurement point
/// `p_cam` with activation radius `l`, dilated by `dilation_px` on each side.
/// Precondition failures (sphere reaching the camera plane) fall back to the
/// full image.
pub fn activation_box(
    cam: &CameraModel,
    p_cam: &Point3<f64>,
    l: f64,
    dilation_px: u32,
) -> ActivationBox {
    let full = ActivationBox {
        analytic: None,
        u_lo: 0,
        u_hi: cam.width - 1,
        v_lo: 0,
        v_hi: cam.height - 1,
        full_image_fallback: true,
    };
    if l <= 0.0 {
        // Point sphere: the box degenerates to the projection of the point.
        return match cam.project_unbounded(p_cam) {
            Some((u, v)) => clamp_box(cam, (u, u, v, v), dilation_px),
            None => full,
        };
    }
    let (u_ext, v_ext) = match (
        silhouette_extrema(p_cam.x, p_cam.z, l),
        silhouette_extrema(p_cam.y, p_cam.z, l),
    ) {
        (Some(u), Some(v)) => (u, v),
        _ => return full,
    };
    let bounds = (
        cam.focal * u_ext.0 + cam.cx,
        cam.focal * u_ext.1 + cam.cx,
        cam.focal * v_ext.0 + cam.cy,
        cam.focal * v_ext.1 + cam.cy,
    );
    clamp_box(cam, bounds, dilation_px)
}

fn clamp_box(cam: &CameraModel, bounds: (f64, f64, f64, f64), dilation_px: u32) -> ActivationBox {
    let d = dilation_px as i64;
    let u_lo = (bounds.0.floor() as i64 - d).clamp(0, cam.width as i64 - 1) as u32;
    let u_hi = (bounds.1.floor() as i64 + d).clamp(0, cam.width as i64 - 1) as u32;
    let v_lo = (bounds.2.floor() as i64 - d).clamp(0, cam.height as i64 - 1) as u32;
    let v_hi = (bounds.3.floor() as i64 + d).clamp(0, cam.height as i64 - 1) as u32;
    ActivationBox {
        analytic: Some(bounds),
        u_lo,
        u_hi,
        v_lo,
        v_hi,
        full_image_fallback: false,
    }
}

/// A measurement point prepared for the update: map/camera positions, noise
/// scale and activation box.
#[derive(Debug, Clone)]
pub struct MeasurementPoint {
    pub pixel: (u32, u32),
    pub instance_id: InstanceId,
    /// Map-frame position.
    pub position: Point3<f64>,
    /// Camera-frame depth.
    pub depth: f64,
    /// Isotropic position noise deviation at this depth.
    pub sigma: f64,
    pub activation: ActivationBox,
}

/// Extracts and prepares the frame's measurement set: stride-subsampled
/// labeled pixels with their activation boxes.
pub fn prepare_measurements(
    frame: &MeasurementFrame,
    cam: &CameraModel,
    params: &FilterParams,
) -> Vec<MeasurementPoint> {
    let raw = frame.extract_points(cam, params.measurement_stride);
    let map_to_cam = frame.pose.map_to_cam();
    raw.into_iter()
        .map(|r: RawMeasurement| {
            let sigma = params.sigma_at(r.depth);
            let l = activation_radius(sigma, params.activation_epsilon);
            let p_cam = map_to_cam.apply(&r.position);
            let activation = activation_box(cam, &p_cam, l, params.bbox_dilation_px);
            MeasurementPoint {
                pixel: r.pixel,
                instance_id: r.instance_id,
                position: r.position,
                depth: r.depth,
                sigma,
                activation,
            }
        })
        .collect()
}
