//! Command-line driver: simulate sequences, run the mapper, evaluate map
//! exports against ground truth, and benchmark mapping time over map sizes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use phdmap::config::{CliOverrides, RunConfig};
use phdmap::evaluation::{evaluate_frame, write_metrics_csv};
use phdmap::filter::{LabeledVoxelMap, UpdateMode};
use phdmap::pipeline::{load_scene, run_sequence, write_timing_csv};
use phdmap::replay::SequenceWriter;
use phdmap::sim::{build_ground_truth, GroundTruthMap, Simulator};

#[derive(Parser)]
#[command(
    name = "phdmap",
    about = "Particle-based instance-aware semantic occupancy mapping",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Configuration file (TOML; flat dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; fixes all random draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of frames to simulate or replay.
    #[arg(long, global = true)]
    frames: Option<u32>,
    /// Total map extent in meters (power-of-two multiple of the voxel size).
    #[arg(long, global = true)]
    map_size: Option<f64>,
    /// Voxel edge length in meters.
    #[arg(long, global = true)]
    voxel: Option<f64>,
    /// Update mode: individual (if) or collective (cf) filtering.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<UpdateMode>,
    /// Disable the template memory.
    #[arg(long, global = true)]
    no_memory: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scene description file (TOML) for simulation.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<UpdateMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "if" => Ok(UpdateMode::If),
        "cf" => Ok(UpdateMode::Cf),
        other => Err(format!("unknown mode {other:?} (expected if or cf)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence and save it as a replay directory
    /// (frames plus ground-truth maps).
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the mapping pipeline on a simulated or recorded sequence and
    /// export per-frame maps, metrics and timings.
    Map {
        #[command(flatten)]
        common: CommonArgs,
        /// "simulate" or a replay directory written by `simulate`.
        #[arg(long)]
        input: Option<String>,
    },
    /// Score exported maps (map_XXXXXX.txt) against ground-truth maps
    /// (gt_XXXXXX.txt).
    Eval {
        /// Directory containing map_XXXXXX.txt files.
        est_dir: PathBuf,
        /// Directory containing gt_XXXXXX.txt files.
        gt_dir: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Timing sweep of the mapper over map extents.
    Bench {
        /// Comma-separated map extents in meters.
        #[arg(long, default_value = "12.8,25.6")]
        sizes: String,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn build_config(common: &CommonArgs, input: Option<String>) -> Result<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    let with_env = base.apply_env(std::env::vars())?;
    let cli = CliOverrides {
        seed: common.seed,
        frames: common.frames,
        map_size: common.map_size,
        voxel: common.voxel,
        mode: common.mode,
        no_memory: common.no_memory,
        out: common
            .out
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned()),
        input,
        scene: common
            .scene
            .as_ref()
            .map(|p| p.to_string_lossy().into_owned()),
    };
    Ok(cli.apply(with_env)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common } => simulate(&common),
        Command::Map { common, input } => map(&common, input),
        Command::Eval {
            est_dir,
            gt_dir,
            common,
        } => eval(&est_dir, &gt_dir, &common),
        Command::Bench { sizes, common } => bench(&sizes, &common),
    }
}

fn simulate(common: &CommonArgs) -> Result<()> {
    let config = build_config(common, None)?;
    config.validate()?;
    let scene = load_scene(&config)?;
    let cam = config.camera.build()?;
    let out = PathBuf::from(&config.output_dir);
    let mut sim = Simulator::new(scene.clone(), cam, config.noise.clone(), config.seed);
    let mut writer = SequenceWriter::create(&out, &cam, sim.label_table())?;
    let ground_truth = build_ground_truth(
        &scene,
        &cam,
        config.frames,
        config.grid.m,
        config.grid.voxel,
        config.gt_stride,
    );
    for k in 0..config.frames {
        let frame = sim.frame(k);
        writer.write_frame(&frame)?;
        writer.write_ground_truth(k, &ground_truth[k as usize])?;
    }
    writer.finalize()?;
    println!(
        "wrote {} frames to {}",
        config.frames,
        out.display()
    );
    Ok(())
}

fn map(common: &CommonArgs, input: Option<String>) -> Result<()> {
    let config = build_config(common, input)?;
    let summary = run_sequence(&config)?;
    for warning in &summary.warnings {
        eprintln!("warning: {warning}");
    }
    let occupied = summary
        .final_map
        .occupied()
        .count();
    let speculative = summary.final_map.speculative().count();
    println!(
        "mapped {} frames: {} occupied voxels, {} speculative, {} templates stored",
        summary.frames, occupied, speculative, summary.templates_stored
    );
    if let Some(last) = summary.metrics.last() {
        println!(
            "last frame: f1={:.3} ahd={} adm={}",
            last.f1,
            last.ahd.map_or("n/a".into(), |v| format!("{v:.3}")),
            last.adm.map_or("n/a".into(), |v| format!("{v:.3}")),
        );
    }
    let mean_total =
        summary.timing.iter().map(|t| t.total_ms).sum::<f64>() / summary.timing.len().max(1) as f64;
    println!("mean frame time {mean_total:.1} ms (see timing.csv)");
    Ok(())
}

fn indexed_files(dir: &Path, prefix: &str) -> Result<BTreeMap<u32, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(rest) = name.strip_prefix(prefix) {
            if let Some(idx) = rest.strip_suffix(".txt").and_then(|s| s.parse::<u32>().ok()) {
                out.insert(idx, path);
            }
        }
    }
    Ok(out)
}

fn eval(est_dir: &Path, gt_dir: &Path, common: &CommonArgs) -> Result<()> {
    let config = build_config(common, None)?;
    let est_files = indexed_files(est_dir, "map_")?;
    let gt_files = indexed_files(gt_dir, "gt_")?;
    if est_files.is_empty() {
        bail!("no map_XXXXXX.txt files in {}", est_dir.display());
    }
    let mut rows = Vec::new();
    for (k, est_path) in &est_files {
        let Some(gt_path) = gt_files.get(k) else {
            eprintln!("warning: no ground truth for frame {k}");
            continue;
        };
        let est = LabeledVoxelMap::read_text(&fs::read_to_string(est_path)?)?;
        let gt = GroundTruthMap::read_text(&fs::read_to_string(gt_path)?)?;
        rows.push(evaluate_frame(&est, &gt, None, *k));
    }
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("metrics.csv");
    let mut buf = Vec::new();
    write_metrics_csv(&rows, &mut buf)?;
    fs::write(&path, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    println!("wrote {}", path.display());
    Ok(())
}

fn bench(sizes: &str, common: &CommonArgs) -> Result<()> {
    let sizes: Vec<f64> = sizes
        .split(',')
        .map(|s| s.trim().parse::<f64>().context("bad size"))
        .collect::<Result<_>>()?;
    let base = build_config(common, None)?;
    let out_dir = PathBuf::from(&base.output_dir);
    fs::create_dir_all(&out_dir)?;
    let mut table = String::from(
        "size_m,frames,recenter_ms,predict_ms,visibility_ms,update_ms,matching_ms,birth_ms,estimate_ms,memory_store_ms,total_ms\n",
    );
    for size in &sizes {
        let mut config = base.clone();
        let cli = CliOverrides {
            map_size: Some(*size),
            ..Default::default()
        };
        config = cli.apply(config)?;
        if config.frames > 20 && common.frames.is_none() {
            config.frames = 10;
        }
        let run_dir = out_dir.join(format!("bench_{size}"));
        config.output_dir = run_dir.to_string_lossy().into_owned();
        let summary = run_sequence(&config)?;
        let n = summary.timing.len().max(1) as f64;
        let mean = |f: &dyn Fn(&phdmap::pipeline::StageTiming) -> f64| {
            summary.timing.iter().map(|t| f(t)).sum::<f64>() / n
        };
        let row = format!(
            "{size},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
            summary.frames,
            mean(&|t| t.recenter_ms),
            mean(&|t| t.predict_ms),
            mean(&|t| t.visibility_ms),
            mean(&|t| t.update_ms),
            mean(&|t| t.matching_ms),
            mean(&|t| t.birth_ms),
            mean(&|t| t.estimate_ms),
            mean(&|t| t.memory_store_ms),
            mean(&|t| t.total_ms),
        );
        table.push_str(&row);
        let timing_path = run_dir.join("timing.csv");
        let mut buf = Vec::new();
        write_timing_csv(&summary.timing, &mut buf)?;
        fs::write(timing_path, buf)?;
    }
    print!("{table}");
    fs::write(out_dir.join("bench.csv"), table)?;
    Ok(())
}
