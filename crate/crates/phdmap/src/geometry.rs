//! Rigid transforms, pinhole camera model and voxel ray traversal.
//!
//! Conventions: camera frame is z forward, x right, y down. Pixel membership
//! uses half-open intervals `[0, width) x [0, height)`. Depth images store the
//! camera-frame z coordinate, not the ray length.

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Tolerance for orthonormality and unit-length checks.
pub const GEOM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with determinant +1 (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("ray direction is not unit length (|d| = {0})")]
    NotUnitDirection(f64),
    #[error("invalid camera intrinsics: {0}")]
    BadCamera(String),
}

/// A rigid body transform: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotation matrices that are not proper
    /// orthonormal within [`GEOM_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = rotation_deviation(&rotation);
        if dev > GEOM_TOL {
            return Err(GeometryError::NotARotation(dev));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Skips the orthonormality check. For inputs already known to be valid
    /// (compositions of checked transforms, unit quaternions).
    pub fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Maximum absolute deviation from another transform over rotation
    /// entries and translation components.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = (r.determinant() - 1.0).abs();
    gram.max(det)
}

/// Transforms a point: returns `R p + t`.
pub fn transform_point(t: &RigidTransform, p: &Point3<f64>) -> Point3<f64> {
    t.apply(p)
}

/// Camera pose in the map frame at a given time step.
#[derive(Debug, Clone, Copy)]
pub struct Pose {
    /// Camera-to-map transform.
    pub cam_to_map: RigidTransform,
    /// Time step index.
    pub step: u32,
}

impl Pose {
    pub fn new(cam_to_map: RigidTransform, step: u32) -> Self {
        Self { cam_to_map, step }
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.cam_to_map.translation())
    }

    pub fn map_to_cam(&self) -> RigidTransform {
        self.cam_to_map.inverse()
    }
}

/// Pinhole camera intrinsics plus the sensing range limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub max_range: f64,
}

impl CameraModel {
    pub fn new(
        focal: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        max_range: f64,
    ) -> Result<Self, GeometryError> {
        if !(focal > 0.0) {
            return Err(GeometryError::BadCamera(format!("focal {focal} must be > 0")));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::BadCamera(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        if !(max_range > 0.0) {
            return Err(GeometryError::BadCamera(format!(
                "max_range {max_range} must be > 0"
            )));
        }
        Ok(Self {
            focal,
            cx,
            cy,
            width,
            height,
            max_range,
        })
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    /// Returns `None` for points behind the camera or off the image.
    pub fn project(&self, p_cam: &Point3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        let u = self.focal * p_cam.x / p_cam.z + self.cx;
        let v = self.focal * p_cam.y / p_cam.z + self.cy;
        if u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64 {
            Some((u, v))
        } else {
            None
        }
    }

    /// Like [`project`](Self::project) but without the image-bound test.
    /// Still requires positive depth.
    pub fn project_unbounded(&self, p_cam: &Point3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.focal * p_cam.x / p_cam.z + self.cx,
            self.focal * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Recovers the camera-frame point at pixel `(u, v)` and depth `z`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Point3<f64> {
        Point3::new(
            (u - self.cx) / self.focal * depth,
            (v - self.cy) / self.focal * depth,
            depth,
        )
    }

    /// Unnormalized camera-frame ray through pixel `(u, v)`; its z component
    /// is 1, so the ray parameter equals depth.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// One step of a voxel ray traversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelStep {
    /// Integer voxel index (global lattice, `floor(p / resolution)`).
    pub index: [i64; 3],
    /// Ray parameter at which the voxel is entered (0 for the start voxel).
    pub t_enter: f64,
}

/// Amortized constant-cost voxel traversal of a ray on the global lattice.
///
/// Yields the start voxel first with `t_enter = 0`, then each voxel crossed,
/// in order. Tie-breaking when the ray hits an edge or a corner steps the
/// lowest axis first (x before y before z). The iterator is unbounded; bound
/// it with `take_while` on `t_enter`.
#[derive(Debug, Clone)]
pub struct RayTraversal {
    voxel: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    started: bool,
}

impl RayTraversal {
    pub fn new(
        origin: &Point3<f64>,
        direction: &Vector3<f64>,
        resolution: f64,
    ) -> Result<Self, GeometryError> {
        let norm = direction.norm();
        if (norm - 1.0).abs() > GEOM_TOL {
            return Err(GeometryError::NotUnitDirection(norm));
        }
        Ok(Self::new_unchecked(origin, direction, resolution))
    }

    /// Skips the unit-length check (the traversal itself only requires a
    /// nonzero direction; `t` is then in units of `|direction|`).
    pub fn new_unchecked(origin: &Point3<f64>, direction: &Vector3<f64>, resolution: f64) -> Self {
        let mut voxel = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let o = origin[a];
            let d = direction[a];
            voxel[a] = (o / resolution).floor() as i64;
            if d > 0.0 {
                step[a] = 1;
                let boundary = (voxel[a] + 1) as f64 * resolution;
                t_max[a] = (boundary - o) / d;
                t_delta[a] = resolution / d;
            } else if d < 0.0 {
                step[a] = -1;
                let boundary = voxel[a] as f64 * resolution;
                t_max[a] = (boundary - o) / d;
                t_delta[a] = resolution / -d;
            }
        }
        Self {
            voxel,
            step,
            t_max,
            t_delta,
            started: false,
        }
    }
}

impl Iterator for RayTraversal {
    type Item = VoxelStep;

    fn next(&mut self) -> Option<VoxelStep> {
        if !self.started {
            self.started = true;
            return Some(VoxelStep {
                index: self.voxel,
                t_enter: 0.0,
            });
        }
        let mut axis = 0;
        if self.t_max[1] < self.t_max[axis] {
            axis = 1;
        }
        if self.t_max[2] < self.t_max[axis] {
            axis = 2;
        }
        if !self.t_max[axis].is_finite() {
            return None;
        }
        let t = self.t_max[axis];
        self.voxel[axis] += self.step[axis];
        self.t_max[axis] += self.t_delta[axis];
        Some(VoxelStep {
            index: self.voxel,
            t_enter: t,
        })
    }
}

/// Traversal of voxels from `origin` along a unit `direction`; see
/// [`RayTraversal`].
pub fn cast_ray(
    origin: &Point3<f64>,
    direction: &Vector3<f64>,
    resolution: f64,
) -> Result<RayTraversal, GeometryError> {
    RayTraversal::new(origin, direction, resolution)
}
