//! Per-frame sensor data: depth and instance-ID images, camera pose, and
//! per-instance metadata (semantic label, movability, estimated transform).

use nalgebra::Point3;

use crate::geometry::{CameraModel, Pose, RigidTransform};
use crate::grid::{InstanceId, UNLABELED};

/// Dense row-major image of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Copy> Image<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn at(&self, u: u32, v: u32) -> T {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: T) {
        self.data[v as usize * self.width as usize + u as usize] = value;
    }
}

/// Depth image in meters; invalid pixels hold `f32::INFINITY`.
pub type DepthImage = Image<f32>;
/// Instance-ID image; `UNLABELED` (0) marks background/unlabeled pixels.
pub type IdImage = Image<InstanceId>;

/// Metadata for one instance observed in a frame.
#[derive(Debug, Clone)]
pub struct InstanceObservation {
    pub instance_id: InstanceId,
    pub semantic_label: u32,
    pub movable: bool,
    /// Map-frame transform of the instance's points from the previous step to
    /// this step. Absent for newly observed instances.
    pub transform: Option<RigidTransform>,
}

/// One time step's instance-labeled sensor data.
#[derive(Debug, Clone)]
pub struct MeasurementFrame {
    pub step: u32,
    pub pose: Pose,
    pub depth: DepthImage,
    pub ids: IdImage,
    pub instances: Vec<InstanceObservation>,
}

impl MeasurementFrame {
    pub fn instance(&self, id: InstanceId) -> Option<&InstanceObservation> {
        self.instances.iter().find(|o| o.instance_id == id)
    }

    /// Extracts the instance-labeled point set: one point per labeled pixel
    /// on the stride-aligned sub-grid with a finite depth within range.
    /// Positions are in the map frame.
    pub fn extract_points(&self, cam: &CameraModel, stride: u32) -> Vec<RawMeasurement> {
        let stride = stride.max(1);
        let cam_to_map = self.pose.cam_to_map;
        let mut out = Vec::new();
        let mut v = 0;
        while v < self.depth.height {
            let mut u = 0;
            while u < self.depth.width {
                let d = self.depth.at(u, v) as f64;
                let id = self.ids.at(u, v);
                if id != UNLABELED && d.is_finite() && d > 0.0 && d <= cam.max_range {
                    let p_cam = cam.unproject(u as f64 + 0.5, v as f64 + 0.5, d);
                    out.push(RawMeasurement {
                        pixel: (u, v),
                        depth: d,
                        instance_id: id,
                        position: cam_to_map.apply(&p_cam),
                    });
                }
                u += stride;
            }
            v += stride;
        }
        out
    }
}

/// A measurement point before activation-box preparation.
#[derive(Debug, Clone, Copy)]
pub struct RawMeasurement {
    pub pixel: (u32, u32),
    pub depth: f64,
    pub instance_id: InstanceId,
    /// Map-frame position.
    pub position: Point3<f64>,
}
