use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drivetwin::camera::CameraConfig;
use drivetwin::detector::DetectionSet;
use drivetwin::experiment::{run_experiment, CollectionRef, DetectorChoice, ExperimentConfig};
use drivetwin::scene::Illumination;
use drivetwin::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        collection: CollectionRef { scenes_per_distance: 2, distances_m: vec![150.0, 200.0], ..Default::default() },
        cameras: Some(vec![CameraConfig::new(2.8, 5.6), CameraConfig::new(2.0, 4.0)]),
        camera_designs: None,
        conditions: vec![Illumination::Day, Illumination::Night],
        detector: DetectorChoice::default(),
        bootstrap: 4,
        output_dir: out.to_path_buf(),
        seed: 3,
        mtf: Default::default(),
        spm: Default::default(),
        save_images: false,
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn rerun_uses_cache_and_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = run_experiment(&cfg).unwrap();
    assert_eq!(first.tasks_cached, 0);
    assert_eq!(first.tasks_run, 2 * 2 * 2 * 2);
    let before = snapshot(dir.path());
    for name in ["curves.csv", "curves.json", "od50.json", "mtf50.csv", "run_log.json"] {
        assert!(before.contains_key(Path::new(name)), "{name} missing");
    }
    assert!(before.keys().any(|p| p.starts_with("spm")));

    let second = run_experiment(&cfg).unwrap();
    assert_eq!(second.tasks_run, 0);
    assert_eq!(second.tasks_cached, first.tasks_run);
    assert_eq!(second.curves, first.curves);
    assert_eq!(snapshot(dir.path()), before);

    // a lost cache entry is recomputed to the same bytes
    let task = before.keys().find(|p| p.starts_with("tasks")).unwrap().clone();
    std::fs::remove_file(dir.path().join(&task)).unwrap();
    let third = run_experiment(&cfg).unwrap();
    assert_eq!(third.tasks_run, 1);
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn same_output_dir_with_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.conditions = vec![Illumination::Day];
    cfg.cameras = Some(vec![CameraConfig::new(2.8, 5.6)]);
    run_experiment(&cfg).unwrap();
    cfg.seed += 1;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn external_detections_reproduce_baseline_curves() {
    let base_dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(base_dir.path());
    cfg.bootstrap = 0;
    let baseline = run_experiment(&cfg).unwrap();

    let ext = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    for cond in &cfg.conditions {
        std::fs::create_dir_all(ext.path().join(cond.label())).unwrap();
        for cam in cfg.cameras.as_ref().unwrap() {
            let rel = Path::new(&cond.label()).join(format!("{}.json", cam.id));
            std::fs::copy(base_dir.path().join("detections").join(&rel), ext.path().join(&rel)).unwrap();
        }
    }
    let mut ext_cfg = cfg.clone();
    ext_cfg.output_dir = out.path().to_path_buf();
    ext_cfg.detector = DetectorChoice::External(ext.path().to_path_buf());
    let external = run_experiment(&ext_cfg).unwrap();
    assert_eq!(external.tasks_run, 0);
    assert_eq!(external.curves, baseline.curves);
    assert_eq!(
        std::fs::read(out.path().join("curves.csv")).unwrap(),
        std::fs::read(base_dir.path().join("curves.csv")).unwrap()
    );

    // an image dropped from the covered set
    let victim = ext.path().join("day").join(format!("{}.json", cfg.cameras.as_ref().unwrap()[0].id));
    let mut set: DetectionSet = serde_json::from_slice(&std::fs::read(&victim).unwrap()).unwrap();
    let dropped = set.images.as_mut().unwrap().remove(0);
    set.detections.retain(|d| d.image_id != dropped);
    std::fs::write(&victim, set.to_json().unwrap()).unwrap();
    let other = tempfile::tempdir().unwrap();
    ext_cfg.output_dir = other.path().to_path_buf();
    let err = run_experiment(&ext_cfg).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains(&dropped)), "{err}");

    std::fs::remove_file(&victim).unwrap();
    let err = run_experiment(&ext_cfg).unwrap_err();
    assert!(matches!(err, Error::Data(ref m) if m.contains("missing external detections")), "{err}");
}

#[test]
fn invalid_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.conditions.clear();
    assert!(run_experiment(&cfg).unwrap_err().is_config());
    let mut cfg = tiny(dir.path());
    cfg.bootstrap = 1;
    assert!(run_experiment(&cfg).unwrap_err().is_config());
    assert!(ExperimentConfig::from_json(br#"{"output_dir": "x", "conditions": ["day"], "bogus": 1}"#).unwrap_err().is_config());
}
