//! Run configuration: a single TOML file with flat dotted keys, overridable
//! by `PHDMAP_*` environment variables and CLI flags (precedence:
//! CLI flag > environment > file > default). Unknown keys are rejected.
//!
//! Environment variables map to config paths with `__` as the separator,
//! e.g. `PHDMAP_FILTER__P_D=0.9` sets `filter.p_d`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{FilterParams, UpdateMode};
use crate::geometry::CameraModel;
use crate::memory::MemoryParams;
use crate::sim::NoiseSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const ENV_PREFIX: &str = "PHDMAP_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Voxels per axis as a power of two (2^m).
    pub m: u32,
    /// Voxel edge length in meters.
    pub voxel: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { m: 7, voxel: 0.2 }
    }
}

impl GridConfig {
    pub fn extent(&self) -> f64 {
        (1u64 << self.m) as f64 * self.voxel
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub max_range: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal: 320.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            max_range: 15.0,
        }
    }
}

impl CameraConfig {
    pub fn build(&self) -> Result<CameraModel, ConfigError> {
        CameraModel::new(
            self.focal,
            self.cx,
            self.cy,
            self.width,
            self.height,
            self.max_range,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: u32,
    /// "simulate" or the path of a recorded sequence directory.
    pub input: String,
    /// Scene description file for simulation; empty uses the built-in demo
    /// scene.
    pub scene_file: String,
    pub output_dir: String,
    /// Directory for cross-run template persistence (loaded before the run,
    /// saved after). Empty disables persistence.
    pub templates_dir: String,
    pub grid: GridConfig,
    pub camera: CameraConfig,
    pub filter: FilterParams,
    pub memory: MemoryParams,
    pub noise: NoiseSpec,
    /// Pixel stride for ground-truth accumulation in simulation runs.
    pub gt_stride: u32,
    /// Also export the binary map variant next to each text map.
    pub export_binary_maps: bool,
    /// Export a particle snapshot after the final frame.
    pub export_snapshot: bool,
    /// Resample every cell every frame instead of only on demand
    /// (verification aid; the map estimate must not depend on it).
    pub force_resample_every_frame: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 50,
            input: "simulate".into(),
            scene_file: String::new(),
            output_dir: "out".into(),
            templates_dir: String::new(),
            grid: GridConfig::default(),
            camera: CameraConfig::default(),
            filter: FilterParams::default(),
            memory: MemoryParams::default(),
            noise: NoiseSpec::default(),
            gt_stride: 2,
            export_binary_maps: false,
            export_snapshot: false,
            force_resample_every_frame: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.filter
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.noise
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.camera.build()?;
        if self.grid.m == 0 || self.grid.m > 10 {
            return Err(ConfigError::Invalid("grid.m must be in 1..=10".into()));
        }
        if !(self.grid.voxel > 0.0) {
            return Err(ConfigError::Invalid("grid.voxel must be > 0".into()));
        }
        if self.gt_stride == 0 {
            return Err(ConfigError::Invalid("gt_stride must be >= 1".into()));
        }
        if self.input.is_empty() {
            return Err(ConfigError::Invalid("input must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(content: &str) -> Result<Self, ConfigError> {
        let value: toml::Value =
            toml::from_str(content).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self, ConfigError> {
        value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let content = std::fs::read_to_string(path)?;
        Self::from_toml(&content)
    }

    /// Applies environment overrides from variables named
    /// `PHDMAP_<PATH>` with `__` separating nesting levels.
    pub fn apply_env(self, vars: impl Iterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut value = toml::Value::try_from(&self).expect("config serializes");
        let mut found = false;
        let mut overrides: Vec<(String, String)> = vars
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.to_ascii_lowercase(), v))
            })
            .collect();
        overrides.sort();
        for (path, raw) in overrides {
            let parts: Vec<&str> = path.split("__").collect();
            set_path(&mut value, &parts, &raw)
                .map_err(|e| ConfigError::Parse(format!("{}{}: {e}", ENV_PREFIX, path.to_ascii_uppercase())))?;
            found = true;
        }
        if !found {
            return Ok(self);
        }
        Self::from_value(value)
    }
}

fn set_path(value: &mut toml::Value, parts: &[&str], raw: &str) -> Result<(), String> {
    match parts {
        [] => Err("empty key path".into()),
        [leaf] => {
            let table = value.as_table_mut().ok_or("not a table")?;
            // Parse the raw string with TOML scalar rules; fall back to a
            // plain string (covers unquoted enum values and paths).
            let parsed = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|t| t.get("v").cloned())
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(leaf.to_string(), parsed);
            Ok(())
        }
        [head, rest @ ..] => {
            let table = value.as_table_mut().ok_or("not a table")?;
            let entry = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
            set_path(entry, rest, raw)
        }
    }
}

/// CLI-level overrides, applied last.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub frames: Option<u32>,
    /// Total map extent in meters; combined with the voxel size to pick m.
    pub map_size: Option<f64>,
    pub voxel: Option<f64>,
    pub mode: Option<UpdateMode>,
    pub no_memory: bool,
    pub out: Option<String>,
    pub input: Option<String>,
    pub scene: Option<String>,
}

impl CliOverrides {
    pub fn apply(&self, mut config: RunConfig) -> Result<RunConfig, ConfigError> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(frames) = self.frames {
            config.frames = frames;
        }
        if let Some(voxel) = self.voxel {
            config.grid.voxel = voxel;
        }
        if let Some(size) = self.map_size {
            let ratio = size / config.grid.voxel;
            let m = ratio.log2().round();
            if m < 1.0 || m > 10.0 {
                return Err(ConfigError::Invalid(format!(
                    "map size {size} m at voxel {} m needs 2^{m} cells per axis",
                    config.grid.voxel
                )));
            }
            let actual = (1u64 << m as u32) as f64 * config.grid.voxel;
            if (actual - size).abs() > 1e-6 * size {
                return Err(ConfigError::Invalid(format!(
                    "map size {size} m is not a power-of-two multiple of voxel {} m (nearest: {actual} m)",
                    config.grid.voxel
                )));
            }
            config.grid.m = m as u32;
        }
        if let Some(mode) = self.mode {
            config.filter.update_mode = mode;
        }
        if self.no_memory {
            config.memory.enabled = false;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(input) = &self.input {
            config.input = input.clone();
        }
        if let Some(scene) = &self.scene {
            config.scene_file = scene.clone();
        }
        Ok(config)
    }
}
