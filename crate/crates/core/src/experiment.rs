//! Batch experiments: camera grid × conditions over a scene collection,
//! with resumable per-task results and deterministic merged outputs.
//!
//! Layout of the output directory:
//!
//! ```text
//! run_log.json              config hash, seeds, per-task hashes, output digests
//! curves.csv, curves.json   AP vs distance per (camera, condition)
//! od50.json                 OD50 (+ bootstrap) per (camera, condition)
//! mtf50.csv                 MTF50 per camera
//! manifests/<cond>.json     the collection under each condition
//! detections/<cond>/<camera>.json
//! records/<cond>/<camera>.csv   per-detection TP/FP at each IoU threshold
//! spm/...                   CSV, SVG and JSON maps
//! tasks/<hash>.json         cached per-(camera, scene) results
//! mtf/<hash>.json           cached MTF50 measurements
//! images/<cond>/<camera>/<scene>.png   when `save_images` is set
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::camera::{capture_probe, default_camera_grid, scene_electrons, CameraConfig};
use crate::sensor::ElectronImage;
use crate::detector::{baseline_detect_in_frame, load_detections, BaselineParams, Detection, DetectionSet, BASELINE_NAME};
use crate::error::{Error, Result};
use crate::isp::RgbMetadata;
use crate::metrics::ap::{curve_from_records, curves_csv_bytes, records_to_csv, scene_records, GroundTruthSet};
use crate::metrics::mtf::{measure_mtf50_with, Mtf50Result, MtfOptions};
use crate::metrics::od50::{bootstrap_od50, od50, BootstrapResult, OD50Result, Od50Method};
use crate::metrics::{APCurve, COCO_THRESHOLDS};
use crate::scene::{
    plan_collection, scene_geometry, CollectionOptions, Illumination, SceneManifest, SceneSpec, World, DEFAULT_DIE_MM,
    DEFAULT_FOCAL_LENGTH_MM, STANDARD_DISTANCES_M,
};
use crate::spm::{build_grid, contours, grid_csv, grid_svg, Od50Marker, SpmAxis, SvgStyle};

/// Scenes per distance for desk-scale runs.
pub const DESK_SCENES_PER_DISTANCE: usize = 10;

/// Bumped whenever task results would change for the same inputs.
pub const TASK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionRef {
    #[serde(default = "default_collection_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scenes_per_distance")]
    pub scenes_per_distance: usize,
    #[serde(default = "default_distances")]
    pub distances_m: Vec<f64>,
    #[serde(default)]
    pub world: World,
    /// Existing manifest to use instead of planning one; its geometry is
    /// kept and the illumination fields are redrawn per condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

fn default_collection_name() -> String {
    "desk".into()
}
fn default_scenes_per_distance() -> usize {
    DESK_SCENES_PER_DISTANCE
}
fn default_distances() -> Vec<f64> {
    STANDARD_DISTANCES_M.to_vec()
}

impl Default for CollectionRef {
    fn default() -> Self {
        CollectionRef {
            name: default_collection_name(),
            seed: 0,
            scenes_per_distance: DESK_SCENES_PER_DISTANCE,
            distances_m: default_distances(),
            world: World::default(),
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorChoice {
    Baseline(BaselineParams),
    /// Directory holding `<condition>/<camera_id>.json` detection sets.
    External(PathBuf),
}

impl Default for DetectorChoice {
    fn default() -> Self {
        DetectorChoice::Baseline(BaselineParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpmOptions {
    /// Dense-grid steps per lattice cell.
    pub subdivisions: usize,
    pub levels: Vec<f64>,
    pub style: SvgStyle,
}

impl Default for SpmOptions {
    fn default() -> Self {
        SpmOptions {
            subdivisions: 4,
            levels: vec![0.3, 0.5, 0.7, 0.9],
            style: SvgStyle::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub collection: CollectionRef,
    /// Full camera definitions; the default grid when both this and
    /// `camera_designs` are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cameras: Option<Vec<CameraConfig>>,
    /// `[pixel_size_um, f_number]` pairs with default everything else.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_designs: Option<Vec<[f64; 2]>>,
    pub conditions: Vec<Illumination>,
    #[serde(default)]
    pub detector: DetectorChoice,
    /// Bootstrap replicates for OD50; 0 disables.
    #[serde(default)]
    pub bootstrap: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mtf: MtfOptions,
    #[serde(default)]
    pub spm: SpmOptions,
    #[serde(default)]
    pub save_images: bool,
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&bytes)?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        if let Some(m) = &mut cfg.collection.manifest {
            rebase(m);
        }
        if let DetectorChoice::External(p) = &mut cfg.detector {
            rebase(p);
        }
        Ok(cfg)
    }

    /// Cameras after applying defaults.
    pub fn resolved_cameras(&self) -> Result<Vec<CameraConfig>> {
        let cams = match (&self.cameras, &self.camera_designs) {
            (Some(_), Some(_)) => return Err(Error::Config("give either `cameras` or `camera_designs`, not both".into())),
            (Some(c), None) => c.clone(),
            (None, Some(d)) => d.iter().map(|[p, n]| CameraConfig::new(*p, *n)).collect(),
            (None, None) => default_camera_grid(),
        };
        Ok(cams)
    }

    pub fn validate(&self) -> Result<()> {
        let cams = self.resolved_cameras()?;
        if cams.is_empty() {
            return Err(Error::Config("camera list is empty".into()));
        }
        let mut ids = BTreeSet::new();
        for c in &cams {
            c.validate()?;
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Config(format!("duplicate camera id {}", c.id)));
            }
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("condition list is empty".into()));
        }
        let labels: BTreeSet<String> = self.conditions.iter().map(|c| c.label()).collect();
        if labels.len() != self.conditions.len() {
            return Err(Error::Config("duplicate conditions".into()));
        }
        for c in &self.conditions {
            if let Illumination::Lux(l) = c {
                if !(l.is_finite() && *l > 0.0) {
                    return Err(Error::Config(format!("lux level must be > 0, got {l}")));
                }
            }
        }
        if self.bootstrap == 1 {
            return Err(Error::Config("bootstrap needs B >= 2 (or 0 to disable)".into()));
        }
        if self.spm.subdivisions == 0 {
            return Err(Error::Config("spm.subdivisions must be >= 1".into()));
        }
        if self.collection.manifest.is_none() {
            if self.collection.scenes_per_distance == 0 || self.collection.distances_m.is_empty() {
                return Err(Error::Config("collection needs at least one distance and one scene".into()));
            }
            self.collection.world.validate()?;
        }
        Ok(())
    }

    /// The config with cameras spelled out.
    pub fn canonical(&self) -> Result<Self> {
        let mut c = self.clone();
        c.cameras = Some(self.resolved_cameras()?);
        c.camera_designs = None;
        Ok(c)
    }

    /// Hash of the canonical config without its output directory.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.canonical()?;
        c.output_dir = PathBuf::new();
        Ok(sha256_hex(&serde_json::to_vec(&c)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Capture-noise seed of one task.
pub fn capture_seed(global_seed: u64, camera_id: &str, condition: &Illumination, scene: &SceneSpec) -> u64 {
    let mut h = Sha256::new();
    h.update(b"capture");
    h.update(global_seed.to_le_bytes());
    h.update(camera_id.as_bytes());
    h.update([0]);
    h.update(condition.label().as_bytes());
    h.update([0]);
    h.update(scene.scene_id.as_bytes());
    h.update(scene.seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Everything that determines a task's result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub version: u32,
    pub camera: CameraConfig,
    pub world: World,
    pub scene: SceneSpec,
    pub capture_seed: u64,
    pub detector: BaselineParams,
    pub save_images: bool,
}

impl TaskSpec {
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub exposure_time_s: f64,
    pub saturated_fraction: f64,
    pub gt_px: BBox,
    pub detections: Vec<Detection>,
}

/// Cache directory entry: the full key is stored so a hash hit can be
/// verified.
#[derive(Serialize, Deserialize)]
struct Entry<K, V> {
    key: K,
    value: V,
}

fn cache_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{}.json", &hash[..16]))
}

/// Cached value for `key`, if any. A file under the key's hash that holds
/// a different key is a collision.
fn load_cached<K, V>(dir: &Path, key: &K) -> Result<(Option<V>, String)>
where
    K: Serialize + DeserializeOwned + PartialEq,
    V: DeserializeOwned,
{
    let hash = sha256_hex(&serde_json::to_vec(key)?);
    let path = cache_path(dir, &hash);
    match fs::read(&path) {
        Ok(bytes) => match serde_json::from_slice::<Entry<K, V>>(&bytes) {
            Ok(e) if e.key == *key => Ok((Some(e.value), hash)),
            _ => Err(Error::HashCollision { key: path.display().to_string() }),
        },
        Err(_) => Ok((None, hash)),
    }
}

fn store_cached<K: Serialize, V: Serialize>(dir: &Path, hash: &str, key: &K, value: &V) -> Result<()> {
    write_file(&cache_path(dir, hash), &to_json(&Entry { key, value })?)
}

fn to_json<T: Serialize + ?Sized>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// Writes via a temporary file so an interrupted run leaves no partial file.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs one task: expose, capture, ISP, baseline detection. `probe` holds
/// precomputed probe-exposure electrons; otherwise the scene is imaged.
pub fn run_task(task: &TaskSpec, probe: Option<ElectronImage>, image_dir: Option<&Path>) -> Result<TaskResult> {
    let cam = &task.camera;
    let (probe, gt) = match probe {
        Some(p) => (p, scene_geometry(&task.scene, &cam.render_config(), &task.world)?.0),
        None => {
            let (e, gt, _, _) = scene_electrons(&task.scene, &task.world, cam, cam.policy.probe_exposure)?;
            (e, gt)
        }
    };
    let meta = RgbMetadata {
        scene_id: task.scene.scene_id.clone(),
        camera_id: cam.id.clone(),
        exposure_time_s: 0.0,
    };
    let (raw, rgb) = capture_probe(&probe, cam, task.capture_seed, meta)?;
    if let Some(dir) = image_dir {
        rgb.save(dir.join(format!("{}.png", task.scene.scene_id)))?;
    }
    Ok(TaskResult {
        exposure_time_s: raw.exposure_time,
        saturated_fraction: raw.saturated_fraction,
        gt_px: gt.px,
        detections: baseline_detect_in_frame(&rgb, &task.scene.scene_id, &task.detector, cam.sensor.resolution().0),
    })
}

/// Probe electrons of a fixed-illuminance scene rendered at 1 lux. Those
/// scenes have no headlights, so every other level is a scalar multiple.
fn unit_lux_probe(spec: &SceneSpec, world: &World, camera: &CameraConfig) -> Result<ElectronImage> {
    let unit = SceneSpec {
        illumination: Illumination::Lux(1.0),
        target_lux: 1.0,
        ..spec.clone()
    };
    Ok(scene_electrons(&unit, world, camera, camera.policy.probe_exposure)?.0)
}

fn scaled_probe(unit: &ElectronImage, lux: f64) -> ElectronImage {
    ElectronImage {
        electrons: unit.electrons.iter().map(|e| e * lux).collect(),
        ..unit.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub seed: u64,
    pub replicates: usize,
    pub excluded: usize,
    pub std_m: f64,
    pub mean_m: f64,
}

impl BootstrapSummary {
    fn new(seed: u64, b: &BootstrapResult) -> Self {
        BootstrapSummary {
            seed,
            replicates: b.replicates,
            excluded: b.excluded,
            std_m: b.std_m,
            mean_m: b.mean_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Od50Entry {
    pub camera_id: String,
    pub condition: Illumination,
    pub mtf50_cyc_per_mm: f64,
    pub od50: OD50Result,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TaskLogEntry {
    condition: String,
    camera_id: String,
    scene_id: String,
    scene_seed: u64,
    capture_seed: u64,
    task_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OutputDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunLog {
    tool: String,
    task_version: u32,
    config_hash: String,
    config: ExperimentConfig,
    seed: u64,
    collection_seed: u64,
    conditions: Vec<String>,
    mtf_hashes: BTreeMap<String, String>,
    tasks: Vec<TaskLogEntry>,
    skipped_spm: Vec<String>,
    outputs: Vec<OutputDigest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub condition: Illumination,
    pub camera_id: String,
    pub scene_id: String,
    pub target_lux: f64,
    pub exposure_time_s: f64,
    pub saturated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub curves: Vec<APCurve>,
    pub od50: Vec<Od50Entry>,
    pub mtf50: Vec<Mtf50Result>,
    /// Baseline-detector tasks in condition, camera, scene order; empty for
    /// external detections.
    pub tasks: Vec<TaskOutcome>,
    /// Tasks computed in this run and tasks reused from the cache.
    pub tasks_run: usize,
    pub tasks_cached: usize,
}

impl ExperimentResult {
    pub fn curve(&self, camera_id: &str, condition: &Illumination) -> Option<&APCurve> {
        self.curves.iter().find(|c| c.camera_id == camera_id && c.condition == *condition)
    }

    pub fn od50(&self, camera_id: &str, condition: &Illumination) -> Option<&Od50Entry> {
        self.od50.iter().find(|c| c.camera_id == camera_id && c.condition == *condition)
    }
}

/// Manifests of the collection under each condition, in config order.
/// All share one geometry; only the illumination fields differ.
pub fn condition_manifests(cfg: &ExperimentConfig) -> Result<Vec<SceneManifest>> {
    let c = &cfg.collection;
    let base = match &c.manifest {
        Some(p) => SceneManifest::load(p)?,
        None => plan_collection(&CollectionOptions {
            name: c.name.clone(),
            seed: c.seed,
            scenes_per_distance: c.scenes_per_distance,
            distances_m: c.distances_m.clone(),
            illumination: cfg.conditions[0],
            world: c.world.clone(),
            focal_length_mm: DEFAULT_FOCAL_LENGTH_MM,
            die_mm: DEFAULT_DIE_MM,
        })?,
    };
    Ok(cfg.conditions.iter().map(|cond| base.with_illumination(*cond)).collect())
}

/// Cameras must image the manifest's geometry.
fn check_camera_geometry(cam: &CameraConfig, m: &SceneManifest) -> Result<()> {
    if cam.optics.focal_length_mm != m.focal_length_mm || cam.sensor.die_mm != m.die_mm {
        return Err(Error::Config(format!(
            "camera {} (f = {} mm, die {:?}) does not match the collection (f = {} mm, die {:?})",
            cam.id, cam.optics.focal_length_mm, cam.sensor.die_mm, m.focal_length_mm, m.die_mm
        )));
    }
    Ok(())
}

fn hash_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn bootstrap_seed(global_seed: u64, camera_id: &str, condition: &Illumination) -> u64 {
    hash_seed(&[b"bootstrap", &global_seed.to_le_bytes(), camera_id.as_bytes(), condition.label().as_bytes()])
}

/// Per-condition, per-camera ground truth and detections.
type DetectionTable = Vec<Vec<(GroundTruthSet, DetectionSet)>>;

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cams = cfg.resolved_cameras()?;
    let config_hash = cfg.config_hash()?;
    let out = cfg.output_dir.clone();
    check_previous_run(&out, &config_hash, cfg)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifests = condition_manifests(cfg)?;
    for m in &manifests {
        for c in &cams {
            check_camera_geometry(c, m)?;
        }
    }
    let mut outputs: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for (cond, m) in cfg.conditions.iter().zip(&manifests) {
        outputs.push((PathBuf::from(format!("manifests/{}.json", cond.label())), m.to_json()?));
    }

    // MTF50 per camera
    let mtf_dir = out.join("mtf");
    let mtf: Vec<(Mtf50Result, String)> = cams
        .par_iter()
        .map(|c| {
            let key = (TASK_VERSION, c.clone(), cfg.mtf.clone());
            let (hit, hash) = load_cached::<_, Mtf50Result>(&mtf_dir, &key)?;
            let v = match hit {
                Some(v) => v,
                None => {
                    log::info!("measuring MTF50 of {}", c.id);
                    let v = measure_mtf50_with(c, &cfg.mtf)?;
                    store_cached(&mtf_dir, &hash, &key, &v)?;
                    v
                }
            };
            Ok((v, hash))
        })
        .collect::<Result<_>>()?;
    let mtf_hashes: BTreeMap<String, String> = cams.iter().zip(&mtf).map(|(c, (_, h))| (c.id.clone(), h.clone())).collect();
    let mtf: Vec<Mtf50Result> = mtf.into_iter().map(|(v, _)| v).collect();

    let mut task_log = Vec::new();
    let mut tasks = Vec::new();
    let (mut tasks_run, mut tasks_cached) = (0, 0);
    let table: DetectionTable = match &cfg.detector {
        DetectorChoice::Baseline(params) => {
            let (t, log, outcomes, run, hit) = baseline_table(cfg, &cams, &manifests, params)?;
            task_log = log;
            tasks = outcomes;
            tasks_run = run;
            tasks_cached = hit;
            t
        }
        DetectorChoice::External(dir) => external_table(cfg, &cams, &manifests, dir)?,
    };

    let mut curves = Vec::new();
    let mut od50s = Vec::new();
    for (ci, (cond, m)) in cfg.conditions.iter().zip(&manifests).enumerate() {
        let distances = m.distances();
        for (k, cam) in cams.iter().enumerate() {
            let (gt, dets) = &table[ci][k];
            if matches!(cfg.detector, DetectorChoice::Baseline(_)) {
                outputs.push((PathBuf::from(format!("detections/{}/{}.json", cond.label(), cam.id)), dets.to_json()?));
            }
            let records = scene_records(m, gt, dets, &COCO_THRESHOLDS)?;
            let mut buf = Vec::new();
            records_to_csv(&records, &COCO_THRESHOLDS, &mut buf)?;
            outputs.push((PathBuf::from(format!("records/{}/{}.csv", cond.label(), cam.id)), buf));
            let curve = curve_from_records(&cam.id, *cond, &distances, &records, COCO_THRESHOLDS.len())?;
            let mut od = od50(&curve)?;
            let (mut bootstrap, mut bootstrap_error) = (None, None);
            if cfg.bootstrap >= 2 {
                let seed = bootstrap_seed(cfg.seed, &cam.id, cond);
                match bootstrap_od50(&records, COCO_THRESHOLDS.len(), cfg.bootstrap, seed) {
                    Ok(b) => {
                        od.bootstrap_std_m = Some(b.std_m);
                        bootstrap = Some(BootstrapSummary::new(seed, &b));
                    }
                    Err(Error::Data(msg)) => {
                        log::warn!("{} {}: {msg}", cam.id, cond.label());
                        bootstrap_error = Some(msg);
                    }
                    Err(e) => return Err(e),
                }
            }
            od50s.push(Od50Entry {
                camera_id: cam.id.clone(),
                condition: *cond,
                mtf50_cyc_per_mm: mtf[k].mtf50_cyc_per_mm,
                od50: od,
                bootstrap,
                bootstrap_error,
            });
            curves.push(curve);
        }
    }
    outputs.push((PathBuf::from("curves.csv"), curves_csv_bytes(&curves)?));
    outputs.push((PathBuf::from("curves.json"), to_json(&curves)?));
    outputs.push((PathBuf::from("od50.json"), to_json(&od50s)?));
    outputs.push((PathBuf::from("mtf50.csv"), mtf50_csv(&cams, &mtf)?));

    let mtf_by_id: BTreeMap<String, f64> = cams.iter().zip(&mtf).map(|(c, r)| (c.id.clone(), r.mtf50_cyc_per_mm)).collect();
    let (spm_files, skipped_spm) = spm_outputs(&curves, &mtf_by_id, &od50s, &cfg.spm)?;
    outputs.extend(spm_files);

    let mut digests = Vec::new();
    for (rel, bytes) in &outputs {
        write_file(&out.join(rel), bytes)?;
        digests.push(OutputDigest {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: sha256_hex(bytes),
        });
    }
    let log = RunLog {
        tool: format!("drivetwin {}", env!("CARGO_PKG_VERSION")),
        task_version: TASK_VERSION,
        config_hash: config_hash.clone(),
        config: cfg.canonical()?,
        seed: cfg.seed,
        collection_seed: manifests[0].seed,
        conditions: cfg.conditions.iter().map(|c| c.label()).collect(),
        mtf_hashes,
        tasks: task_log,
        skipped_spm,
        outputs: digests,
    };
    write_file(&out.join("run_log.json"), &to_json(&log)?)?;
    log::info!("{tasks_run} task(s) run, {tasks_cached} reused");
    Ok(ExperimentResult {
        config_hash,
        curves,
        od50: od50s,
        mtf50: mtf,
        tasks,
        tasks_run,
        tasks_cached,
    })
}

/// An output directory holds one config: a run log with another hash is
/// refused, and the same hash with a different config is a collision.
fn check_previous_run(out: &Path, hash: &str, cfg: &ExperimentConfig) -> Result<()> {
    let Ok(bytes) = fs::read(out.join("run_log.json")) else {
        return Ok(());
    };
    let prev: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("run_log.json: {e}")))?;
    let prev_hash = prev.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default();
    if prev_hash != hash {
        return Err(Error::Config(format!(
            "{} holds a run of config {prev_hash}, not {hash}; use another output directory",
            out.display()
        )));
    }
    let mut mine = serde_json::to_value(cfg.canonical()?)?;
    let mut theirs = prev.get("config").cloned().unwrap_or_default();
    for v in [&mut mine, &mut theirs] {
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
    }
    if mine != theirs {
        return Err(Error::HashCollision { key: hash.to_string() });
    }
    Ok(())
}

type BaselineOutcome = (DetectionTable, Vec<TaskLogEntry>, Vec<TaskOutcome>, usize, usize);

fn baseline_table(cfg: &ExperimentConfig, cams: &[CameraConfig], manifests: &[SceneManifest], params: &BaselineParams) -> Result<BaselineOutcome> {
    let out = &cfg.output_dir;
    let task_dir = out.join("tasks");
    let n_scenes = manifests[0].scenes.len();
    let units: Vec<(usize, usize)> = (0..cams.len()).flat_map(|k| (0..n_scenes).map(move |j| (k, j))).collect();
    // per unit: one (hash, result, cached) per condition
    let done: Vec<Vec<(String, TaskResult, bool)>> = units
        .par_iter()
        .map(|&(k, j)| {
            let cam = &cams[k];
            let mut unit_probe: Option<ElectronImage> = None;
            let mut row = Vec::with_capacity(manifests.len());
            for (cond, m) in cfg.conditions.iter().zip(manifests) {
                let scene = m.spec(&m.scenes[j]);
                let task = TaskSpec {
                    version: TASK_VERSION,
                    camera: cam.clone(),
                    world: m.world.clone(),
                    capture_seed: capture_seed(cfg.seed, &cam.id, cond, &scene),
                    scene,
                    detector: params.clone(),
                    save_images: cfg.save_images,
                };
                let (hit, hash) = load_cached::<_, TaskResult>(&task_dir, &task)?;
                if let Some(r) = hit {
                    row.push((hash, r, true));
                    continue;
                }
                let image_dir = cfg.save_images.then(|| out.join("images").join(cond.label()).join(&cam.id));
                let probe = match cond {
                    Illumination::Lux(l) => {
                        if unit_probe.is_none() {
                            unit_probe = Some(unit_lux_probe(&task.scene, &task.world, cam)?);
                        }
                        Some(scaled_probe(unit_probe.as_ref().unwrap(), *l))
                    }
                    _ => None,
                };
                let r = run_task(&task, probe, image_dir.as_deref())?;
                store_cached(&task_dir, &hash, &task, &r)?;
                row.push((hash, r, false));
            }
            log::debug!("{} {} done", cam.id, manifests[0].scenes[j].scene_id);
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut table: DetectionTable = Vec::new();
    let mut log = Vec::new();
    let mut outcomes = Vec::new();
    let (mut run, mut hit) = (0, 0);
    for (ci, (cond, m)) in cfg.conditions.iter().zip(manifests).enumerate() {
        let mut per_cam = Vec::new();
        for (k, cam) in cams.iter().enumerate() {
            let mut gt = GroundTruthSet::new();
            let mut dets = DetectionSet::new(BASELINE_NAME);
            dets.images = Some(m.scenes.iter().map(|e| e.scene_id.clone()).collect());
            for (j, e) in m.scenes.iter().enumerate() {
                let (hash, r, cached) = &done[k * n_scenes + j][ci];
                if *cached {
                    hit += 1;
                } else {
                    run += 1;
                }
                gt.insert(e.scene_id.clone(), vec![r.gt_px]);
                outcomes.push(TaskOutcome {
                    condition: *cond,
                    camera_id: cam.id.clone(),
                    scene_id: e.scene_id.clone(),
                    target_lux: e.target_lux,
                    exposure_time_s: r.exposure_time_s,
                    saturated_fraction: r.saturated_fraction,
                });
                dets.detections.extend(r.detections.iter().cloned());
                log.push(TaskLogEntry {
                    condition: cond.label(),
                    camera_id: cam.id.clone(),
                    scene_id: e.scene_id.clone(),
                    scene_seed: e.seed,
                    capture_seed: capture_seed(cfg.seed, &cam.id, cond, &m.spec(e)),
                    task_hash: hash.clone(),
                });
            }
            per_cam.push((gt, dets));
        }
        table.push(per_cam);
    }
    Ok((table, log, outcomes, run, hit))
}

/// Ground truth from geometry alone plus detections read from
/// `<dir>/<condition>/<camera_id>.json`.
fn external_table(cfg: &ExperimentConfig, cams: &[CameraConfig], manifests: &[SceneManifest], dir: &Path) -> Result<DetectionTable> {
    cfg.conditions
        .iter()
        .zip(manifests)
        .map(|(cond, m)| {
            cams.iter()
                .map(|cam| {
                    let gt = ground_truth_set(m, cam)?;
                    let path = dir.join(cond.label()).join(format!("{}.json", cam.id));
                    if !path.exists() {
                        return Err(Error::Data(format!("missing external detections {}", path.display())));
                    }
                    let dets = load_detections(&path, m)?;
                    dets.require_coverage(m)?;
                    Ok((gt, dets))
                })
                .collect()
        })
        .collect()
}

/// Pixel ground truth of every manifest scene for `camera`, in the
/// coordinates of the rendered window.
pub fn ground_truth_set(manifest: &SceneManifest, camera: &CameraConfig) -> Result<GroundTruthSet> {
    let render = camera.render_config();
    manifest
        .scenes
        .iter()
        .map(|e| Ok((e.scene_id.clone(), vec![scene_geometry(&manifest.spec(e), &render, &manifest.world)?.0.px])))
        .collect()
}

pub const MTF50_CSV_HEADER: [&str; 6] = ["camera_id", "pixel_size_um", "f_number", "mode", "mtf50_cyc_per_mm", "extrapolated"];

fn mtf50_csv(cams: &[CameraConfig], mtf: &[Mtf50Result]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MTF50_CSV_HEADER)?;
    for (c, r) in cams.iter().zip(mtf) {
        let mode = serde_json::to_value(r.mode)?;
        w.write_record([
            c.id.clone(),
            c.sensor.pixel_size_um.to_string(),
            c.optics.f_number.to_string(),
            mode.as_str().unwrap_or_default().to_string(),
            r.mtf50_cyc_per_mm.to_string(),
            r.extrapolated.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

/// `camera_id → MTF50` from a file written by the experiment.
pub fn read_mtf50_csv(bytes: &[u8]) -> Result<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().collect::<Vec<_>>() != MTF50_CSV_HEADER {
        return Err(Error::Data("unexpected mtf50.csv header".into()));
    }
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        let v: f64 = row[4].parse().map_err(|_| Error::Data(format!("bad MTF50 `{}`", &row[4])))?;
        out.insert(row[0].to_string(), v);
    }
    Ok(out)
}

/// SPM files for the given curves: one MTF50-axis map per day/night
/// condition across cameras, and one illuminance-axis map per camera over
/// fixed-lux conditions. Maps that would be degenerate are skipped and
/// reported.
pub fn spm_outputs(
    curves: &[APCurve],
    mtf50: &BTreeMap<String, f64>,
    od50s: &[Od50Entry],
    opts: &SpmOptions,
) -> Result<(Vec<(PathBuf, Vec<u8>)>, Vec<String>)> {
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    let mut emit = |name: String, axis: SpmAxis, input: Vec<(f64, &APCurve)>, markers: Vec<Od50Marker>| -> Result<()> {
        match build_grid(&input, axis, opts.subdivisions) {
            Ok(grid) => {
                let cs = contours(&grid, &opts.levels);
                files.push((PathBuf::from(format!("spm/{name}.csv")), grid_csv(&grid)?));
                files.push((PathBuf::from(format!("spm/{name}.svg")), grid_svg(&grid, &cs, &markers, &opts.style).into_bytes()));
                files.push((PathBuf::from(format!("spm/{name}.json")), to_json(&grid)?));
                files.push((PathBuf::from(format!("spm/{name}_contours.json")), to_json(&cs)?));
                Ok(())
            }
            Err(Error::DegenerateGrid(msg)) => {
                skipped.push(format!("{name}: {msg}"));
                Ok(())
            }
            Err(e) => Err(e),
        }
    };
    let mut conditions: Vec<Illumination> = Vec::new();
    for c in curves {
        if !conditions.contains(&c.condition) {
            conditions.push(c.condition);
        }
    }
    for cond in conditions.iter().filter(|c| !matches!(c, Illumination::Lux(_))) {
        let mut input = Vec::new();
        for c in curves.iter().filter(|c| c.condition == *cond) {
            let y = *mtf50.get(&c.camera_id).ok_or_else(|| Error::Data(format!("no MTF50 for camera {}", c.camera_id)))?;
            input.push((y, c));
        }
        let markers = od50s
            .iter()
            .filter(|e| e.condition == *cond && e.od50.method == Od50Method::Interpolated && e.camera_id == crate::camera::CameraConfig::anchor().id)
            .map(|e| Od50Marker {
                label: format!("OD50 {} {}", e.camera_id, cond.label()),
                distance_m: e.od50.od50_m,
            })
            .collect();
        emit(format!("{}_mtf50", cond.label()), SpmAxis::Mtf50, input, markers)?;
    }
    let mut cam_ids: Vec<&str> = Vec::new();
    for c in curves {
        if !cam_ids.contains(&c.camera_id.as_str()) {
            cam_ids.push(&c.camera_id);
        }
    }
    for id in cam_ids {
        let input: Vec<(f64, &APCurve)> = curves
            .iter()
            .filter(|c| c.camera_id == id)
            .filter_map(|c| match c.condition {
                Illumination::Lux(l) => Some((l, c)),
                _ => None,
            })
            .collect();
        if input.is_empty() {
            continue;
        }
        emit(format!("{id}_lux"), SpmAxis::Lux, input, Vec::new())?;
    }
    Ok((files, skipped))
}

/// Writes an SPM set from an experiment output directory's `curves.csv`,
/// `mtf50.csv` and `od50.json` into `<dir>/spm`, keeping maps of `axis`.
pub fn spm_from_dir(dir: &Path, axis: SpmAxis, opts: &SpmOptions) -> Result<Vec<PathBuf>> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let curves = crate::metrics::ap::curves_from_csv(&read("curves.csv")?)?;
    let mtf = match axis {
        SpmAxis::Mtf50 => read_mtf50_csv(&read("mtf50.csv")?)?,
        SpmAxis::Lux => BTreeMap::new(),
    };
    let od50s: Vec<Od50Entry> = match fs::read(dir.join("od50.json")) {
        Ok(b) => serde_json::from_slice(&b).map_err(|e| Error::Data(format!("od50.json: {e}")))?,
        Err(_) => Vec::new(),
    };
    let selected: Vec<APCurve> = curves
        .into_iter()
        .filter(|c| matches!(c.condition, Illumination::Lux(_)) == (axis == SpmAxis::Lux))
        .collect();
    let (files, skipped) = spm_outputs(&selected, &mtf, &od50s, opts)?;
    if files.is_empty() {
        return Err(Error::DegenerateGrid(format!("no {} map could be built: {}", axis.key(), skipped.join("; "))));
    }
    let mut written = Vec::new();
    for (rel, bytes) in files {
        let p = dir.join(rel);
        write_file(&p, &bytes)?;
        written.push(p);
    }
    Ok(written)
}
