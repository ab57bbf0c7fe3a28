//! Shared test helpers: an exhaustive AP oracle, rank statistics and the
//! builders behind the golden files.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use drivetwin::bbox::BBox;
use drivetwin::detector::{Detection, DetectionSet, CATEGORY};
use drivetwin::metrics::{APCurve, ApPoint};
use drivetwin::scene::{generate_scene, plan_collection, CollectionOptions, Illumination, RenderConfig, SceneSpec, World};
use drivetwin::spectral::WaveGrid;
use rand::Rng;

/// Integer box `[x, y, w, h]`.
pub type IBox = [i64; 4];

/// IoU as an exact fraction `(intersection, union)`.
fn iou_frac(a: IBox, b: IBox) -> (i64, i64) {
    let w = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let h = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    let inter = if w > 0 && h > 0 { w * h } else { 0 };
    (inter, a[2] * a[3] + b[2] * b[3] - inter)
}

/// p/q ≥ τ with τ = pct/100, exactly.
fn frac_at_least(f: (i64, i64), pct: i64) -> bool {
    f.1 > 0 && 100 * f.0 >= pct * f.1
}

fn frac_gt(a: (i64, i64), b: (i64, i64)) -> bool {
    (a.0 as i128) * (b.1 as i128) > (b.0 as i128) * (a.1 as i128)
}

/// Brute-force COCO-style AP over integer boxes and thresholds given in
/// percent. `None` when there is no ground truth.
///
/// Ranking: score descending, then image id, then position in `dets`. Each
/// detection takes the unmatched ground truth with the largest IoU ≥ τ,
/// lowest index on ties. Interpolated precision at recall r is the maximum
/// precision over every prefix whose recall reaches r.
pub fn oracle_ap(gt: &BTreeMap<String, Vec<IBox>>, dets: &[(String, IBox, f64)], thresholds_pct: &[i64]) -> Option<f64> {
    let n_gt: usize = gt.values().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2).then(dets[a].0.cmp(&dets[b].0)).then(a.cmp(&b)));
    let mut per_threshold = Vec::new();
    for &pct in thresholds_pct {
        let mut taken: BTreeMap<&str, Vec<bool>> = gt.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
        let mut tp = Vec::new();
        for &d in &order {
            let (img, b, _) = &dets[d];
            let boxes = &gt[img];
            let flags = taken.get_mut(img.as_str()).unwrap();
            let mut best: Option<(usize, (i64, i64))> = None;
            for (g, gb) in boxes.iter().enumerate() {
                let f = iou_frac(*b, *gb);
                if flags[g] || !frac_at_least(f, pct) {
                    continue;
                }
                if best.is_none_or(|(_, bf)| frac_gt(f, bf)) {
                    best = Some((g, f));
                }
            }
            if let Some((g, _)) = best {
                flags[g] = true;
            }
            tp.push(best.is_some());
        }
        let prefix = |k: usize| {
            let hits = tp[..k].iter().filter(|t| **t).count();
            (hits as f64 / n_gt as f64, hits as f64 / k as f64)
        };
        let mut sum = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let mut best = None::<f64>;
            for k in 1..=tp.len() {
                let (rec, prec) = prefix(k);
                if rec >= r {
                    best = Some(best.map_or(prec, |b| b.max(prec)));
                }
            }
            if let Some(p) = best {
                sum += p;
            }
        }
        per_threshold.push(sum / 101.0);
    }
    Some(per_threshold.iter().sum::<f64>() / per_threshold.len() as f64)
}

/// A random instance: up to 5 images, 4 boxes per image and 6 detections
/// in total, on a coarse integer grid so IoU ties and exact threshold hits
/// occur.
pub fn random_instance<R: Rng>(rng: &mut R) -> (BTreeMap<String, Vec<IBox>>, Vec<(String, IBox, f64)>) {
    let rbox = |rng: &mut R| -> IBox { [rng.gen_range(0..8) * 2, rng.gen_range(0..8) * 2, rng.gen_range(1..6) * 2, rng.gen_range(1..6) * 2] };
    let n_img = rng.gen_range(1..=5);
    let mut gt: BTreeMap<String, Vec<IBox>> = BTreeMap::new();
    for i in 0..n_img {
        let n = rng.gen_range(0..=4);
        gt.insert(format!("img{i}"), (0..n).map(|_| rbox(rng)).collect());
    }
    let ids: Vec<String> = gt.keys().cloned().collect();
    let n_det = rng.gen_range(0..=6);
    let dets = (0..n_det)
        .map(|_| {
            let img = ids[rng.gen_range(0..ids.len())].clone();
            // sometimes copy or nudge a ground-truth box
            let b = match gt[&img].len() {
                0 => rbox(rng),
                n if rng.gen_bool(0.6) => {
                    let g: IBox = gt[&img][rng.gen_range(0..n)];
                    [g[0] + rng.gen_range(-2..=2), g[1] + rng.gen_range(-2..=2), g[2], g[3]]
                }
                _ => rbox(rng),
            };
            (img, b, [0.25, 0.5, 0.75, 0.9][rng.gen_range(0..4)])
        })
        .collect();
    (gt, dets)
}

pub fn to_bbox(b: IBox) -> BBox {
    BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64)
}

pub fn to_sets(gt: &BTreeMap<String, Vec<IBox>>, dets: &[(String, IBox, f64)]) -> (BTreeMap<String, Vec<BBox>>, DetectionSet) {
    let g = gt.iter().map(|(k, v)| (k.clone(), v.iter().map(|b| to_bbox(*b)).collect())).collect();
    let mut set = DetectionSet::new("test");
    set.detections = dets
        .iter()
        .map(|(img, b, s)| Detection {
            image_id: img.clone(),
            bbox: to_bbox(*b),
            score: *s,
            category: CATEGORY.into(),
        })
        .collect();
    (g, set)
}

/// Ranks from 1 with ties given their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// A 200 m day scene on a coarse spectral grid and preview pitch.
pub fn golden_scene() -> drivetwin::spectral::SpectralImage {
    let spec = SceneSpec {
        scene_id: "golden".into(),
        distance_m: 200.0,
        illumination: Illumination::Day,
        target_lux: 50.0,
        car_index: 3,
        lateral_offset_m: 0.25,
        seed: 11,
    };
    let render = RenderConfig {
        grid: WaveGrid::new(400.0, 50.0, 7).unwrap(),
        pixel_size_um: 11.2,
        ..RenderConfig::preview()
    };
    generate_scene(&spec, &render, &World::default()).unwrap().radiance
}

pub fn golden_manifest() -> drivetwin::scene::SceneManifest {
    let mut opts = CollectionOptions::standard("golden", 7, Illumination::Night);
    opts.scenes_per_distance = 2;
    plan_collection(&opts).unwrap()
}

pub fn golden_detections() -> DetectionSet {
    let m = golden_manifest();
    let mut set = DetectionSet::new("golden-detector");
    set.images = Some(m.scenes.iter().map(|e| e.scene_id.clone()).collect());
    let boxes = [
        (0, BBox::new(101.5, 80.25, 40.0, 31.125), 0.1 + 0.2),
        (0, BBox::new(3.0, 4.0, 5.0, 6.0), 1.0 / 3.0),
        (5, BBox::new(0.1, 0.2, 0.3, 0.4), 1.0),
        (11, BBox::new(250.0, 190.0, 7.0, 5.0), 0.0),
    ];
    set.detections = boxes
        .iter()
        .map(|&(i, b, s)| Detection {
            image_id: m.scenes[i].scene_id.clone(),
            bbox: b,
            score: s,
            category: CATEGORY.into(),
        })
        .collect();
    set
}

pub fn golden_curves() -> Vec<APCurve> {
    let pts = |v: &[(f64, f64)]| {
        v.iter()
            .map(|&(d, ap)| ApPoint {
                distance_m: d,
                ap,
                n_scenes: 10,
            })
            .collect()
    };
    vec![
        APCurve {
            camera_id: "p1.4_f2.4".into(),
            condition: Illumination::Day,
            points: pts(&[(25.0, 0.9584158415841584), (50.0, 1.0 / 3.0), (200.0, 0.0)]),
        },
        APCurve {
            camera_id: "p2.8_f5.6".into(),
            condition: Illumination::Lux(0.1),
            points: pts(&[(25.0, 0.1 + 0.2), (75.0, 1e-17)]),
        },
    ]
}
