//! Recorded-sequence directory layout: the simulator writes it, the mapping
//! driver replays it, so recorded real data can be substituted for the
//! simulator.
//!
//! Layout of a sequence directory:
//!
//! ```text
//! meta.txt                camera intrinsics, frame count, label table
//! depth_000000.bin        f32 depth grid (binary, see below)
//! ids_000000.bin          u32 instance-ID grid
//! pose_000000.txt         camera-to-map rotation (row-major) + translation
//! inst_000000.txt         per-instance: id label movable has_transform R t
//! gt/gt_000000.txt        optional ground-truth labeled voxel maps
//! ```
//!
//! Binary grid format, little-endian: magic `PMIG`, u32 version (1),
//! u32 dtype (0 = f32, 1 = u32), u32 width, u32 height, then width*height
//! payload values row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::frame::{DepthImage, IdImage, Image, InstanceObservation, MeasurementFrame};
use crate::geometry::{CameraModel, Pose, RigidTransform};
use crate::sim::GroundTruthMap;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReplayError + '_ {
    move |source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> ReplayError {
    ReplayError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

const GRID_MAGIC: &[u8; 4] = b"PMIG";

fn write_grid<T: Copy>(
    path: &Path,
    width: u32,
    height: u32,
    dtype: u32,
    data: &[T],
    to_bytes: impl Fn(T) -> [u8; 4],
) -> Result<(), ReplayError> {
    let mut buf = Vec::with_capacity(20 + data.len() * 4);
    buf.extend_from_slice(GRID_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&dtype.to_le_bytes());
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&height.to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&to_bytes(v));
    }
    fs::write(path, buf).map_err(io_err(path))
}

fn read_grid(path: &Path, expect_dtype: u32) -> Result<(u32, u32, Vec<[u8; 4]>), ReplayError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 20 || &bytes[0..4] != GRID_MAGIC {
        return Err(malformed(path, "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    let dtype = u32_at(8);
    let width = u32_at(12);
    let height = u32_at(16);
    if version != 1 {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    if dtype != expect_dtype {
        return Err(malformed(
            path,
            format!("dtype {dtype}, expected {expect_dtype}"),
        ));
    }
    let n = width as usize * height as usize;
    if bytes.len() != 20 + n * 4 {
        return Err(malformed(
            path,
            format!("payload {} bytes, expected {}", bytes.len() - 20, n * 4),
        ));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    Ok((width, height, data))
}

fn transform_to_line(t: &RigidTransform) -> String {
    let r = t.rotation();
    let tr = t.translation();
    let mut parts = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            parts.push(format!("{}", r[(row, col)]));
        }
    }
    for i in 0..3 {
        parts.push(format!("{}", tr[i]));
    }
    parts.join(" ")
}

fn transform_from_parts(path: &Path, parts: &[&str]) -> Result<RigidTransform, ReplayError> {
    if parts.len() != 12 {
        return Err(malformed(path, format!("expected 12 numbers, got {}", parts.len())));
    }
    let vals: Vec<f64> = parts
        .iter()
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| malformed(path, format!("bad number: {e}")))?;
    let r = Matrix3::new(
        vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], vals[6], vals[7], vals[8],
    );
    let t = Vector3::new(vals[9], vals[10], vals[11]);
    RigidTransform::new(r, t).map_err(|e| malformed(path, e.to_string()))
}

/// Writer for a sequence directory.
pub struct SequenceWriter {
    dir: PathBuf,
    frames: u32,
}

impl SequenceWriter {
    pub fn create(
        dir: &Path,
        cam: &CameraModel,
        labels: &BTreeMap<String, u32>,
    ) -> Result<Self, ReplayError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        fs::create_dir_all(dir.join("gt")).map_err(io_err(dir))?;
        let meta = dir.join("meta.txt");
        let mut content = String::new();
        content.push_str("phdmap-sequence v1\n");
        content.push_str(&format!(
            "camera {} {} {} {} {} {}\n",
            cam.focal, cam.cx, cam.cy, cam.width, cam.height, cam.max_range
        ));
        content.push_str("frames 0\n");
        for (name, id) in labels {
            content.push_str(&format!("label {id} {name}\n"));
        }
        fs::write(&meta, content).map_err(io_err(&meta))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            frames: 0,
        })
    }

    pub fn write_frame(&mut self, frame: &MeasurementFrame) -> Result<(), ReplayError> {
        let k = frame.step;
        let depth_path = self.dir.join(format!("depth_{k:06}.bin"));
        write_grid(
            &depth_path,
            frame.depth.width,
            frame.depth.height,
            0,
            &frame.depth.data,
            |v: f32| v.to_le_bytes(),
        )?;
        let ids_path = self.dir.join(format!("ids_{k:06}.bin"));
        write_grid(
            &ids_path,
            frame.ids.width,
            frame.ids.height,
            1,
            &frame.ids.data,
            |v: u32| v.to_le_bytes(),
        )?;
        let pose_path = self.dir.join(format!("pose_{k:06}.txt"));
        fs::write(
            &pose_path,
            format!("{k} {}\n", transform_to_line(&frame.pose.cam_to_map)),
        )
        .map_err(io_err(&pose_path))?;
        let inst_path = self.dir.join(format!("inst_{k:06}.txt"));
        let mut content = String::new();
        for obs in &frame.instances {
            match &obs.transform {
                Some(t) => content.push_str(&format!(
                    "{} {} {} 1 {}\n",
                    obs.instance_id,
                    obs.semantic_label,
                    obs.movable as u8,
                    transform_to_line(t)
                )),
                None => content.push_str(&format!(
                    "{} {} {} 0\n",
                    obs.instance_id, obs.semantic_label, obs.movable as u8
                )),
            }
        }
        fs::write(&inst_path, content).map_err(io_err(&inst_path))?;
        self.frames = self.frames.max(k + 1);
        Ok(())
    }

    pub fn write_ground_truth(&self, step: u32, gt: &GroundTruthMap) -> Result<(), ReplayError> {
        let path = self.dir.join("gt").join(format!("gt_{step:06}.txt"));
        let mut buf = Vec::new();
        gt.write_text(&mut buf).map_err(io_err(&path))?;
        fs::write(&path, buf).map_err(io_err(&path))
    }

    /// Rewrites the frame count in `meta.txt`. Call after the last frame.
    pub fn finalize(&self) -> Result<(), ReplayError> {
        let meta = self.dir.join("meta.txt");
        let content = fs::read_to_string(&meta).map_err(io_err(&meta))?;
        let updated: String = content
            .lines()
            .map(|line| {
                if line.starts_with("frames ") {
                    format!("frames {}", self.frames)
                } else {
                    line.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        fs::write(&meta, updated).map_err(io_err(&meta))
    }
}

/// Reader over a sequence directory.
#[derive(Debug)]
pub struct SequenceReader {
    dir: PathBuf,
    pub cam: CameraModel,
    pub frames: u32,
    pub labels: BTreeMap<String, u32>,
}

impl SequenceReader {
    pub fn open(dir: &Path) -> Result<Self, ReplayError> {
        let meta = dir.join("meta.txt");
        let content = fs::read_to_string(&meta).map_err(io_err(&meta))?;
        let mut cam = None;
        let mut frames = None;
        let mut labels = BTreeMap::new();
        for line in content.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["camera", f, cx, cy, w, h, r] => {
                    let parse = |s: &str| {
                        s.parse::<f64>()
                            .map_err(|e| malformed(&meta, format!("bad camera value: {e}")))
                    };
                    cam = Some(
                        CameraModel::new(
                            parse(f)?,
                            parse(cx)?,
                            parse(cy)?,
                            w.parse()
                                .map_err(|_| malformed(&meta, "bad camera width"))?,
                            h.parse()
                                .map_err(|_| malformed(&meta, "bad camera height"))?,
                            parse(r)?,
                        )
                        .map_err(|e| malformed(&meta, e.to_string()))?,
                    );
                }
                ["frames", n] => {
                    frames = Some(
                        n.parse()
                            .map_err(|_| malformed(&meta, "bad frame count"))?,
                    )
                }
                ["label", id, name] => {
                    labels.insert(
                        name.to_string(),
                        id.parse().map_err(|_| malformed(&meta, "bad label id"))?,
                    );
                }
                _ => {}
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            cam: cam.ok_or_else(|| malformed(&meta, "missing camera line"))?,
            frames: frames.ok_or_else(|| malformed(&meta, "missing frames line"))?,
            labels,
        })
    }

    pub fn frame(&self, k: u32) -> Result<MeasurementFrame, ReplayError> {
        let depth_path = self.dir.join(format!("depth_{k:06}.bin"));
        let (w, h, raw) = read_grid(&depth_path, 0)?;
        let depth = DepthImage {
            width: w,
            height: h,
            data: raw.into_iter().map(f32::from_le_bytes).collect(),
        };
        let ids_path = self.dir.join(format!("ids_{k:06}.bin"));
        let (w2, h2, raw) = read_grid(&ids_path, 1)?;
        if (w2, h2) != (w, h) {
            return Err(malformed(&ids_path, "dimension mismatch with depth"));
        }
        let ids = IdImage {
            width: w,
            height: h,
            data: raw.into_iter().map(u32::from_le_bytes).collect(),
        };
        let pose_path = self.dir.join(format!("pose_{k:06}.txt"));
        let pose_text = fs::read_to_string(&pose_path).map_err(io_err(&pose_path))?;
        let parts: Vec<&str> = pose_text.split_whitespace().collect();
        if parts.len() != 13 {
            return Err(malformed(&pose_path, "expected step + 12 numbers"));
        }
        let step: u32 = parts[0]
            .parse()
            .map_err(|_| malformed(&pose_path, "bad step"))?;
        let cam_to_map = transform_from_parts(&pose_path, &parts[1..])?;
        let inst_path = self.dir.join(format!("inst_{k:06}.txt"));
        let inst_text = fs::read_to_string(&inst_path).map_err(io_err(&inst_path))?;
        let mut instances = Vec::new();
        for line in inst_text.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.is_empty() {
                continue;
            }
            if parts.len() < 4 {
                return Err(malformed(&inst_path, format!("short line: {line:?}")));
            }
            let instance_id = parts[0]
                .parse()
                .map_err(|_| malformed(&inst_path, "bad instance id"))?;
            let semantic_label = parts[1]
                .parse()
                .map_err(|_| malformed(&inst_path, "bad semantic label"))?;
            let movable = parts[2] == "1";
            let transform = match parts[3] {
                "1" => Some(transform_from_parts(&inst_path, &parts[4..])?),
                "0" => None,
                other => return Err(malformed(&inst_path, format!("bad transform flag {other}"))),
            };
            instances.push(InstanceObservation {
                instance_id,
                semantic_label,
                movable,
                transform,
            });
        }
        Ok(MeasurementFrame {
            step,
            pose: Pose::new(cam_to_map, step),
            depth,
            ids,
            instances,
        })
    }

    pub fn ground_truth(&self, k: u32) -> Option<GroundTruthMap> {
        let path = self.dir.join("gt").join(format!("gt_{k:06}.txt"));
        let content = fs::read_to_string(path).ok()?;
        GroundTruthMap::read_text(&content).ok()
    }
}

/// Writes an `Image<u32>` or depth image pair for debugging outside the
/// sequence layout.
pub fn write_debug_count_grid(path: &Path, img: &Image<u32>) -> Result<(), ReplayError> {
    let mut out = String::new();
    for v in 0..img.height {
        let row: Vec<String> = (0..img.width).map(|u| img.at(u, v).to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{demo_scene, NoiseSpec, Simulator};

    #[test]
    fn sequence_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cam = CameraModel::new(60.0, 40.0, 30.0, 80, 60, 20.0).unwrap();
        let noise = NoiseSpec {
            depth_a: 0.005,
            transform_sigma_t: 0.002,
            ..Default::default()
        };
        let mut sim = Simulator::new(demo_scene(), cam, noise, 5);
        let mut writer = SequenceWriter::create(dir.path(), &cam, sim.label_table()).unwrap();
        let mut originals = Vec::new();
        for k in 0..3 {
            let frame = sim.frame(k);
            writer.write_frame(&frame).unwrap();
            originals.push(frame);
        }
        writer.finalize().unwrap();

        let reader = SequenceReader::open(dir.path()).unwrap();
        assert_eq!(reader.frames, 3);
        assert_eq!(reader.cam, cam);
        assert_eq!(reader.labels.len(), 5);
        for (k, orig) in originals.iter().enumerate() {
            let back = reader.frame(k as u32).unwrap();
            assert_eq!(back.step, orig.step);
            assert_eq!(back.depth.data, orig.depth.data);
            assert_eq!(back.ids.data, orig.ids.data);
            assert_eq!(back.instances.len(), orig.instances.len());
            for (a, b) in back.instances.iter().zip(&orig.instances) {
                assert_eq!(a.instance_id, b.instance_id);
                assert_eq!(a.semantic_label, b.semantic_label);
                assert_eq!(a.movable, b.movable);
                match (&a.transform, &b.transform) {
                    (Some(x), Some(y)) => assert!(x.max_abs_diff(y) < 1e-12),
                    (None, None) => {}
                    other => panic!("transform mismatch: {other:?}"),
                }
            }
            // Pose roundtrip.
            assert!(back
                .pose
                .cam_to_map
                .max_abs_diff(&orig.pose.cam_to_map)
                < 1e-12);
        }
    }

    #[test]
    fn malformed_files_are_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("meta.txt"), "phdmap-sequence v1\n").unwrap();
        let err = SequenceReader::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing camera"));

        std::fs::write(
            dir.path().join("meta.txt"),
            "camera 60 40 30 80 60 20\nframes 1\n",
        )
        .unwrap();
        let reader = SequenceReader::open(dir.path()).unwrap();
        std::fs::write(dir.path().join("depth_000000.bin"), b"nope").unwrap();
        let err = reader.frame(0).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }
}
