//! `drivetwin` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drivetwin::camera::{default_camera_grid, CameraConfig};
use drivetwin::experiment::{run_experiment, spm_from_dir, CollectionRef, ExperimentConfig, SpmOptions};
use drivetwin::metrics::ap::{curve_from_records, curves_from_csv, parse_condition, records_from_csv, CURVE_CSV_HEADER};
use drivetwin::metrics::mtf::{measure_mtf50_with, MtfMode, MtfOptions};
use drivetwin::metrics::od50::{bootstrap_od50, od50, od50_points};
use drivetwin::metrics::APCurve;
use drivetwin::scene::{generate_collection, plan_collection, CollectionOptions, Illumination, RenderConfig, World};
use drivetwin::spm::SpmAxis;
use drivetwin::{Error, Result};

/// Worker threads for parallel stages; defaults to all cores.
const WORKERS_ENV: &str = "DRIVETWIN_WORKERS";

#[derive(Parser)]
#[command(name = "drivetwin", version, about = "Camera-system simulation and detection metrics for driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a scene collection and write its manifest.
    Scenegen {
        #[arg(long)]
        collection: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = drivetwin::experiment::DESK_SCENES_PER_DISTANCE)]
        scenes_per_distance: usize,
        /// `day`, `night` or `lux_<value>`.
        #[arg(long, default_value = "day")]
        condition: String,
        /// Comma-separated distances in meters.
        #[arg(long, value_delimiter = ',')]
        distances: Option<Vec<f64>>,
        /// JSON file with world parameters.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Output directory; defaults to the collection name.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also render preview `.sif` files of every scene.
        #[arg(long)]
        preview: bool,
    },
    /// Measure the MTF50 of one camera.
    Mtf {
        /// Camera id (e.g. `p1.4_f2.4`) from the default grid or `--config`.
        #[arg(long)]
        camera: String,
        /// Experiment config whose camera list is searched.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode, default_value = "slanted_edge")]
        mode: MtfMode,
    },
    /// Run an experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one fixed-illuminance condition per level.
    SweepLux {
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
        /// Base config; its conditions are replaced by the levels.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cameras when no config is given; defaults to the anchor camera.
        #[arg(long, value_delimiter = ',')]
        camera: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        distances: Option<Vec<f64>>,
        #[arg(long)]
        scenes_per_distance: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build SPMs from an experiment output directory.
    Spm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: SpmAxis,
        #[arg(long, default_value_t = SpmOptions::default().subdivisions)]
        subdivisions: usize,
    },
    /// OD50 of curves in a curve CSV or a match-record CSV.
    Od50 {
        #[arg(long)]
        curve: PathBuf,
        /// Bootstrap replicates; needs a match-record CSV.
        #[arg(long, default_value_t = 0)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> std::result::Result<MtfMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown MTF mode `{s}`"))
}

fn parse_axis(s: &str) -> std::result::Result<SpmAxis, String> {
    SpmAxis::parse(s).map_err(|e| e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn find_camera(id: &str, config: Option<&Path>) -> Result<CameraConfig> {
    let cams = match config {
        Some(p) => ExperimentConfig::load(p)?.resolved_cameras()?,
        None => default_camera_grid(),
    };
    if let Some(c) = cams.into_iter().find(|c| c.id == id) {
        return Ok(c);
    }
    // `p<pixel>_f<f-number>` names a default-parameter camera
    let design = id.strip_prefix('p').and_then(|r| r.split_once("_f")).and_then(|(p, n)| Some((p.parse().ok()?, n.parse().ok()?)));
    match design {
        Some((p, n)) if config.is_none() => {
            let c = CameraConfig::new(p, n);
            c.validate()?;
            Ok(c)
        }
        _ => Err(Error::Config(format!("unknown camera `{id}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scenegen { collection, seed, scenes_per_distance, condition, distances, world, output, preview } => {
            let illumination = parse_condition(&condition).map_err(|_| Error::Config(format!("unknown condition `{condition}`")))?;
            let mut opts = CollectionOptions::standard(&collection, seed, illumination);
            opts.scenes_per_distance = scenes_per_distance;
            if let Some(d) = distances {
                opts.distances_m = d;
            }
            if let Some(w) = world {
                opts.world = serde_json::from_slice::<World>(&read(&w)?).map_err(|e| Error::Config(format!("world: {e}")))?;
            }
            let out = output.unwrap_or_else(|| PathBuf::from(&collection));
            let manifest = if preview {
                generate_collection(&opts, &out, &RenderConfig::preview())?
            } else {
                let m = plan_collection(&opts)?;
                std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
                m.save(out.join("manifest.json"))?;
                m
            };
            eprintln!("{} scenes -> {}", manifest.scenes.len(), out.join("manifest.json").display());
        }
        Command::Mtf { camera, config, mode } => {
            let cam = find_camera(&camera, config.as_deref())?;
            let opts = MtfOptions { mode, ..Default::default() };
            print_json(&measure_mtf50_with(&cam, &opts)?)?;
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = run_experiment(&cfg)?;
            eprintln!("config {}: {} task(s) run, {} reused -> {}", &r.config_hash[..16], r.tasks_run, r.tasks_cached, cfg.output_dir.display());
            print_json(&r.od50)?;
        }
        Command::SweepLux { levels, config, camera, distances, scenes_per_distance, output, seed } => {
            if let Some(l) = levels.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
                return Err(Error::Config(format!("illuminance level {l} must be > 0")));
            }
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig {
                    collection: CollectionRef::default(),
                    cameras: None,
                    camera_designs: None,
                    conditions: Vec::new(),
                    detector: Default::default(),
                    bootstrap: 0,
                    output_dir: PathBuf::from("sweep-lux"),
                    seed: 0,
                    mtf: Default::default(),
                    spm: Default::default(),
                    save_images: false,
                },
            };
            cfg.conditions = levels.iter().map(|l| Illumination::Lux(*l)).collect();
            match camera {
                Some(ids) => {
                    cfg.cameras = Some(ids.iter().map(|id| find_camera(id, config.as_deref())).collect::<Result<_>>()?);
                    cfg.camera_designs = None;
                }
                None if config.is_none() => cfg.cameras = Some(vec![CameraConfig::anchor()]),
                None => {}
            }
            if let Some(d) = distances {
                cfg.collection.distances_m = d;
            }
            if let Some(k) = scenes_per_distance {
                cfg.collection.scenes_per_distance = k;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = run_experiment(&cfg)?;
            eprintln!("{} task(s) run, {} reused -> {}", r.tasks_run, r.tasks_cached, cfg.output_dir.display());
            print_json(&r.curves)?;
        }
        Command::Spm { input, axis, subdivisions } => {
            let opts = SpmOptions { subdivisions, ..Default::default() };
            for p in spm_from_dir(&input, axis, &opts)? {
                println!("{}", p.display());
            }
        }
        Command::Od50 { curve, bootstrap, seed } => {
            let bytes = read(&curve)?;
            let header = bytes.split(|b| *b == b'\n').next().unwrap_or_default();
            let is_curve = header == CURVE_CSV_HEADER.join(",").as_bytes();
            let mut out = Vec::new();
            if is_curve {
                if bootstrap > 0 {
                    return Err(Error::Config("bootstrap needs a match-record CSV, not a curve CSV".into()));
                }
                for c in curves_from_csv(&bytes)? {
                    out.push(serde_json::json!({ "camera_id": c.camera_id, "condition": c.condition, "od50": od50(&c)? }));
                }
            } else {
                let (records, thresholds) = records_from_csv(&bytes)?;
                let mut distances: Vec<f64> = records.iter().map(|r| r.distance_m).collect();
                distances.sort_by(f64::total_cmp);
                distances.dedup();
                let c: APCurve = curve_from_records("", Illumination::Day, &distances, &records, thresholds.len())?;
                let mut r = od50_points(&c.points)?;
                let mut entry = serde_json::json!({ "points": c.points });
                if bootstrap > 0 {
                    match bootstrap_od50(&records, thresholds.len(), bootstrap, seed) {
                        Ok(b) => {
                            r.bootstrap_std_m = Some(b.std_m);
                            entry["bootstrap"] = serde_json::json!({ "seed": seed, "replicates": b.replicates, "excluded": b.excluded, "std_m": b.std_m, "mean_m": b.mean_m });
                        }
                        Err(e @ Error::Data(_)) => {
                            log::warn!("bootstrap: {e}");
                            entry["bootstrap_error"] = e.to_string().into();
                        }
                        Err(e) => return Err(e),
                    }
                }
                entry["od50"] = serde_json::to_value(&r)?;
                out.push(entry);
            }
            print_json(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("worker pool: {e}");
                }
            }
            _ => {
                eprintln!("error: {WORKERS_ENV} must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
