//! Sequence driver: runs the per-frame pipeline
//! recenter -> predict -> visibility -> update -> matching -> birth ->
//! estimate -> template store -> evaluate -> compaction, collecting map
//! exports, metrics tables and per-stage timings.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::config::RunConfig;
use crate::evaluation::{evaluate_frame, write_metrics_csv, write_per_class_csv, FrameMetrics};
use crate::filter::{
    birth, estimate_map, force_resample_all, predict, update, LabeledVoxelMap, TemplateBirth,
};
use crate::frame::MeasurementFrame;
use crate::geometry::CameraModel;
use crate::grid::{InstanceRegistry, VoxelGrid};
use crate::memory::{
    match_instance, maybe_store_template, read_template, write_template, TemplateLibrary,
};
use crate::replay::SequenceReader;
use crate::rng::{derive, Stream};
use crate::sim::{build_ground_truth, demo_scene, parse_scene, GroundTruthMap, Scene, Simulator};
use crate::visibility::{build_indices_image, prepare_measurements};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Replay(#[from] crate::replay::ReplayError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Wall-clock milliseconds per stage for one frame.
#[derive(Debug, Clone, Default)]
pub struct StageTiming {
    pub frame: u32,
    pub recenter_ms: f64,
    pub predict_ms: f64,
    pub visibility_ms: f64,
    pub update_ms: f64,
    pub matching_ms: f64,
    pub birth_ms: f64,
    pub estimate_ms: f64,
    pub memory_store_ms: f64,
    pub evaluate_ms: f64,
    pub total_ms: f64,
    pub live_particles: usize,
    pub visible_particles: usize,
    pub measurements: usize,
}

pub const TIMING_CSV_HEADER: &str = "frame,recenter_ms,predict_ms,visibility_ms,update_ms,matching_ms,birth_ms,estimate_ms,memory_store_ms,evaluate_ms,total_ms,live_particles,visible_particles,measurements";

pub fn write_timing_csv<W: Write>(rows: &[StageTiming], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{TIMING_CSV_HEADER}")?;
    for t in rows {
        writeln!(
            w,
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{},{},{}",
            t.frame,
            t.recenter_ms,
            t.predict_ms,
            t.visibility_ms,
            t.update_ms,
            t.matching_ms,
            t.birth_ms,
            t.estimate_ms,
            t.memory_store_ms,
            t.evaluate_ms,
            t.total_ms,
            t.live_particles,
            t.visible_particles,
            t.measurements
        )?;
    }
    Ok(())
}

/// Per-frame inputs for the driver.
enum FrameSource {
    Sim {
        sim: Box<Simulator>,
        ground_truth: Vec<GroundTruthMap>,
    },
    Replay(SequenceReader),
}

impl FrameSource {
    fn frame(&mut self, k: u32) -> Result<MeasurementFrame, PipelineError> {
        match self {
            FrameSource::Sim { sim, .. } => Ok(sim.frame(k)),
            FrameSource::Replay(reader) => Ok(reader.frame(k)?),
        }
    }

    fn ground_truth(&self, k: u32) -> Option<GroundTruthMap> {
        match self {
            FrameSource::Sim { ground_truth, .. } => ground_truth.get(k as usize).cloned(),
            FrameSource::Replay(reader) => reader.ground_truth(k),
        }
    }
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub frames: u32,
    pub metrics: Vec<FrameMetrics>,
    pub timing: Vec<StageTiming>,
    pub warnings: Vec<String>,
    pub final_map: LabeledVoxelMap,
    pub templates_stored: usize,
}

/// Loads the configured scene (file or built-in demo).
pub fn load_scene(config: &RunConfig) -> Result<Scene, PipelineError> {
    if config.scene_file.is_empty() {
        Ok(demo_scene())
    } else {
        let content = fs::read_to_string(Path::new(&config.scene_file))
            .map_err(io_err(Path::new(&config.scene_file)))?;
        Ok(parse_scene(&content)?)
    }
}

/// Runs a full mapping sequence per the configuration, writing all artifacts
/// into the output directory: per-frame map exports (`map_XXXXXX.txt`),
/// `metrics.csv`, `per_class.csv`, `timing.csv`, the effective configuration
/// (`effective_config.toml`), and optionally binary maps, a final particle
/// snapshot and the template library.
pub fn run_sequence(config: &RunConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let effective = out_dir.join("effective_config.toml");
    fs::write(&effective, config.to_toml()).map_err(io_err(&effective))?;

    let mut summary = RunSummary::default();

    // Input source and camera.
    let (mut source, cam): (FrameSource, CameraModel) = if config.input == "simulate" {
        let scene = load_scene(config)?;
        let cam = config.camera.build()?;
        let ground_truth = build_ground_truth(
            &scene,
            &cam,
            config.frames,
            config.grid.m,
            config.grid.voxel,
            config.gt_stride,
        );
        let sim = Simulator::new(scene, cam, config.noise.clone(), config.seed);
        (
            FrameSource::Sim {
                sim: Box::new(sim),
                ground_truth,
            },
            cam,
        )
    } else {
        let reader = SequenceReader::open(Path::new(&config.input))?;
        let cam = reader.cam;
        if reader.frames < config.frames {
            summary.warnings.push(format!(
                "sequence has {} frames, requested {}",
                reader.frames, config.frames
            ));
        }
        (FrameSource::Replay(reader), cam)
    };
    let frames = match &source {
        FrameSource::Replay(r) => config.frames.min(r.frames),
        FrameSource::Sim { .. } => config.frames,
    };

    let mut grid: Option<VoxelGrid> = None;
    let mut registry = InstanceRegistry::default();
    let mut library = TemplateLibrary::default();
    if !config.templates_dir.is_empty() {
        load_templates(Path::new(&config.templates_dir), &mut library, &mut summary);
    }

    let mut metrics_rows: Vec<FrameMetrics> = Vec::new();
    let mut timing_rows: Vec<StageTiming> = Vec::new();

    for k in 0..frames {
        let frame = source.frame(k)?;
        let total_start = Instant::now();
        let mut timing = StageTiming {
            frame: k,
            ..Default::default()
        };

        let grid = grid.get_or_insert_with(|| {
            VoxelGrid::new(
                config.grid.m,
                config.grid.voxel,
                config.filter.cell_capacity as usize,
                &frame.pose.position(),
            )
            .expect("validated grid parameters")
        });

        let t = Instant::now();
        grid.recenter(&frame.pose.position());
        timing.recenter_ms = ms(t);

        let t = Instant::now();
        let mut predict_rng = derive(config.seed, Stream::Predict, k as u64);
        let report = predict(
            grid,
            &mut registry,
            &frame.instances,
            &config.filter,
            k,
            &mut predict_rng,
        );
        for id in &report.missing_history {
            summary
                .warnings
                .push(format!("frame {k}: no history for occluded instance {id}"));
        }
        timing.predict_ms = ms(t);

        let t = Instant::now();
        let indices = build_indices_image(grid, &cam, &frame.pose, &frame.depth);
        let measurements = prepare_measurements(&frame, &cam, &config.filter);
        timing.visibility_ms = ms(t);
        timing.visible_particles = indices.entries().len();
        timing.measurements = measurements.len();

        let t = Instant::now();
        update(grid, &indices, &measurements, &config.filter, k);
        timing.update_ms = ms(t);

        // Template matching for large newly observed instances.
        let t = Instant::now();
        let mut template_births: Vec<TemplateBirth> = Vec::new();
        if config.memory.enabled && !library.is_empty() {
            let mut by_instance: BTreeMap<u32, Vec<nalgebra::Point3<f64>>> = BTreeMap::new();
            for z in &measurements {
                by_instance
                    .entry(z.instance_id)
                    .or_default()
                    .push(z.position);
            }
            let mut match_rng = derive(config.seed, Stream::Matching, k as u64);
            for (id, points) in by_instance {
                let is_new = registry.get(id).map_or(true, |r| r.particles.is_empty());
                if !is_new || points.len() <= config.memory.trigger_points {
                    continue;
                }
                let Some(obs) = frame.instance(id) else {
                    continue;
                };
                if !obs.movable {
                    continue;
                }
                match match_instance(
                    &points,
                    &frame.pose.position(),
                    &library,
                    obs.semantic_label,
                    config.grid.voxel,
                    &config.memory,
                    &mut match_rng,
                ) {
                    Ok(Some(result)) => {
                        let template =
                            &library.templates(result.semantic_label)[result.template_index];
                        template_births.push(TemplateBirth {
                            instance_id: id,
                            positions: template
                                .particles
                                .iter()
                                .map(|(p, _)| result.transform.apply(p))
                                .collect(),
                        });
                    }
                    Ok(None) => {}
                    Err(e) => summary
                        .warnings
                        .push(format!("frame {k}: matching instance {id}: {e}")),
                }
            }
        }
        timing.matching_ms = ms(t);

        let t = Instant::now();
        let mut birth_rng = derive(config.seed, Stream::Birth, k as u64);
        birth(
            grid,
            &mut registry,
            &measurements,
            &frame.instances,
            &template_births,
            &config.filter,
            k,
            &mut birth_rng,
        );
        timing.birth_ms = ms(t);

        if config.force_resample_every_frame {
            let mut resample_rng = derive(config.seed, Stream::Resample, k as u64);
            force_resample_all(grid, &mut resample_rng);
        }

        let t = Instant::now();
        let map = estimate_map(grid, &registry, &config.filter);
        timing.estimate_ms = ms(t);

        // Completeness test and template storage for observed instances.
        let t = Instant::now();
        if config.memory.enabled {
            for obs in &frame.instances {
                if !obs.movable {
                    continue;
                }
                match maybe_store_template(
                    grid,
                    &mut registry,
                    &map,
                    &mut library,
                    obs.instance_id,
                    &config.memory,
                    k,
                ) {
                    Ok(crate::memory::StoreOutcome::Stored) => summary.templates_stored += 1,
                    Ok(_) => {}
                    Err(e) => summary
                        .warnings
                        .push(format!("frame {k}: storing template: {e}")),
                }
            }
        }
        timing.memory_store_ms = ms(t);

        // Map export.
        let map_path = out_dir.join(format!("map_{k:06}.txt"));
        let mut buf = Vec::new();
        map.write_text(&mut buf)?;
        fs::write(&map_path, buf).map_err(io_err(&map_path))?;
        if config.export_binary_maps {
            let bin_path = out_dir.join(format!("map_{k:06}.bin"));
            let mut buf = Vec::new();
            map.write_binary(&mut buf)?;
            fs::write(&bin_path, buf).map_err(io_err(&bin_path))?;
        }

        // Evaluation (failure to evaluate never aborts mapping).
        let t = Instant::now();
        if let Some(gt) = source.ground_truth(k) {
            metrics_rows.push(evaluate_frame(&map, &gt, Some((&cam, &frame.pose)), k));
        }
        timing.evaluate_ms = ms(t);

        registry.compact(grid);
        grid.prune_empty_cells();

        timing.live_particles = grid.total_live_particles();
        timing.total_ms = ms(total_start);
        timing_rows.push(timing);
        summary.final_map = map;
    }

    if let Some(grid) = &grid {
        if config.export_snapshot {
            let path = out_dir.join("snapshot.bin");
            let mut buf = Vec::new();
            grid.write_snapshot(&mut buf)?;
            fs::write(&path, buf).map_err(io_err(&path))?;
        }
    }

    // Tables.
    let metrics_path = out_dir.join("metrics.csv");
    let mut buf = Vec::new();
    write_metrics_csv(&metrics_rows, &mut buf).map_err(io_err(&metrics_path))?;
    fs::write(&metrics_path, buf).map_err(io_err(&metrics_path))?;
    let per_class_path = out_dir.join("per_class.csv");
    let mut buf = Vec::new();
    write_per_class_csv(&metrics_rows, &mut buf).map_err(io_err(&per_class_path))?;
    fs::write(&per_class_path, buf).map_err(io_err(&per_class_path))?;
    let timing_path = out_dir.join("timing.csv");
    let mut buf = Vec::new();
    write_timing_csv(&timing_rows, &mut buf).map_err(io_err(&timing_path))?;
    fs::write(&timing_path, buf).map_err(io_err(&timing_path))?;

    // Template persistence.
    if !config.templates_dir.is_empty() {
        save_templates(Path::new(&config.templates_dir), &library, &mut summary);
    }

    summary.frames = frames;
    summary.metrics = metrics_rows;
    summary.timing = timing_rows;
    Ok(summary)
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn load_templates(dir: &Path, library: &mut TemplateLibrary, summary: &mut RunSummary) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "tpl"))
        .collect();
    paths.sort();
    for path in paths {
        match fs::File::open(&path) {
            Ok(file) => match read_template(&mut std::io::BufReader::new(file)) {
                Ok(t) => library.push(t),
                Err(e) => summary
                    .warnings
                    .push(format!("skipping template {}: {e}", path.display())),
            },
            Err(e) => summary
                .warnings
                .push(format!("skipping template {}: {e}", path.display())),
        }
    }
}

fn save_templates(dir: &Path, library: &TemplateLibrary, summary: &mut RunSummary) {
    if let Err(e) = fs::create_dir_all(dir) {
        summary
            .warnings
            .push(format!("cannot create template dir {}: {e}", dir.display()));
        return;
    }
    for (i, template) in library.iter().enumerate() {
        let path = dir.join(format!(
            "label{:03}_{i:03}.tpl",
            template.semantic_label
        ));
        let mut buf = Vec::new();
        if write_template(template, &mut buf).is_ok() {
            if let Err(e) = fs::write(&path, buf) {
                summary
                    .warnings
                    .push(format!("cannot write template {}: {e}", path.display()));
            }
        }
    }
}
