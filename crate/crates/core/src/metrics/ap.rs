//! COCO-style average precision with greedy matching and 101-point
//! interpolation.
//!
//! Detection order is score descending; equal scores are ordered by image
//! id ascending, then by position in the detection set.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::detector::DetectionSet;
use crate::error::{Error, Result};
use crate::scene::{Illumination, SceneManifest};

/// IoU thresholds 0.50:0.05:0.95.
pub const COCO_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Slack for the `iou ≥ τ` test so an overlap that equals a threshold in
/// exact arithmetic is not lost to rounding.
pub const IOU_EPS: f64 = 1e-12;

/// Ground truth boxes keyed by image id. Images with no objects map to an
/// empty list.
pub type GroundTruthSet = BTreeMap<String, Vec<BBox>>;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// One detection after matching, in within-image match order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedDetection {
    /// Position among this image's detections in the input set.
    pub det_index: usize,
    pub score: f64,
    /// Matched ground-truth index per threshold.
    pub matched: Vec<Option<usize>>,
}

/// Per-image TP/FP record at each threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image_id: String,
    pub n_gt: usize,
    pub detections: Vec<MatchedDetection>,
}

/// Greedy matching on one image: each detection, best score first, takes
/// the unmatched ground truth with the highest IoU ≥ τ (lowest index on
/// IoU ties).
pub fn match_image(image_id: &str, gt: &[BBox], dets: &[(BBox, f64)], thresholds: &[f64]) -> ImageMatches {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let ious: Vec<Vec<f64>> = order.iter().map(|&d| gt.iter().map(|g| dets[d].0.iou(g)).collect()).collect();
    let mut detections: Vec<MatchedDetection> = order
        .iter()
        .map(|&d| MatchedDetection {
            det_index: d,
            score: dets[d].1,
            matched: Vec::with_capacity(thresholds.len()),
        })
        .collect();
    for &tau in thresholds {
        let mut taken = vec![false; gt.len()];
        for (rank, det) in detections.iter_mut().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in ious[rank].iter().enumerate() {
                if taken[g] || v + IOU_EPS < tau {
                    continue;
                }
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            det.matched.push(best.map(|(g, _)| g));
        }
    }
    ImageMatches {
        image_id: image_id.to_string(),
        n_gt: gt.len(),
        detections,
    }
}

/// AP per threshold from match records. `images` is in tie-break order:
/// equal scores rank by position in the slice, so a resampled set may repeat
/// an image.
pub fn ap_from_matches(images: &[&ImageMatches], n_thresholds: usize) -> Result<Vec<f64>> {
    let n_gt: usize = images.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Err(Error::UndefinedAp("no ground truth objects".into()));
    }
    // (score, slot, rank within image)
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (slot, m) in images.iter().enumerate() {
        for (rank, d) in m.detections.iter().enumerate() {
            if d.matched.len() != n_thresholds {
                return Err(Error::Data(format!(
                    "{}: match record has {} thresholds, expected {n_thresholds}",
                    m.image_id,
                    d.matched.len()
                )));
            }
            all.push((d.score, slot, rank));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = Vec::with_capacity(n_thresholds);
    for t in 0..n_thresholds {
        let tp: Vec<bool> = all.iter().map(|&(_, s, r)| images[s].detections[r].matched[t].is_some()).collect();
        out.push(interpolated_ap(&tp, n_gt));
    }
    Ok(out)
}

/// 101-point interpolated AP of a ranked TP/FP list.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let n = tp.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let k = recall.partition_point(|&x| x < r);
        if k < n {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Greedy-matches every image in `gt` against `dets`. Detections on images
/// missing from `gt` are an error.
pub fn match_all(gt: &GroundTruthSet, dets: &DetectionSet, thresholds: &[f64]) -> Result<Vec<ImageMatches>> {
    let mut by_image: BTreeMap<&str, Vec<(BBox, f64)>> = BTreeMap::new();
    for d in &dets.detections {
        if !gt.contains_key(&d.image_id) {
            return Err(Error::UnknownImage(d.image_id.clone()));
        }
        by_image.entry(d.image_id.as_str()).or_default().push((d.bbox, d.score));
    }
    Ok(gt
        .iter()
        .map(|(id, boxes)| {
            let empty = Vec::new();
            let d = by_image.get(id.as_str()).unwrap_or(&empty);
            match_image(id, boxes, d, thresholds)
        })
        .collect())
}

/// Mean over `thresholds` of the 101-point AP.
pub fn coco_ap(gt: &GroundTruthSet, dets: &DetectionSet, thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one IoU threshold is required".into()));
    }
    let matches = match_all(gt, dets, thresholds)?;
    let refs: Vec<&ImageMatches> = matches.iter().collect();
    let per = ap_from_matches(&refs, thresholds.len())?;
    Ok(mean(&per))
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApPoint {
    pub distance_m: f64,
    pub ap: f64,
    pub n_scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APCurve {
    pub camera_id: String,
    pub condition: Illumination,
    pub points: Vec<ApPoint>,
}

impl APCurve {
    pub fn validate(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if !(w[1].distance_m > w[0].distance_m) {
                return Err(Error::Data(format!("{}: distances not strictly increasing", self.camera_id)));
            }
        }
        if let Some(p) = self.points.iter().find(|p| !(0.0..=1.0).contains(&p.ap)) {
            return Err(Error::Data(format!("{}: AP {} outside [0, 1]", self.camera_id, p.ap)));
        }
        Ok(())
    }

    pub fn ap_at(&self, distance_m: f64) -> Option<f64> {
        self.points.iter().find(|p| p.distance_m == distance_m).map(|p| p.ap)
    }
}

/// Match records of one scene, tagged with its distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub distance_m: f64,
    pub matches: ImageMatches,
}

/// Partitions the manifest by distance and matches each scene.
pub fn scene_records(manifest: &SceneManifest, gt: &GroundTruthSet, dets: &DetectionSet, thresholds: &[f64]) -> Result<Vec<SceneRecord>> {
    let ids: BTreeSet<&str> = manifest.scenes.iter().map(|e| e.scene_id.as_str()).collect();
    if let Some(id) = gt.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(Error::UnknownImage(id.clone()));
    }
    let mut scoped = GroundTruthSet::new();
    for e in &manifest.scenes {
        let boxes = gt
            .get(&e.scene_id)
            .ok_or_else(|| Error::Data(format!("no ground truth for scene {}", e.scene_id)))?;
        scoped.insert(e.scene_id.clone(), boxes.clone());
    }
    let matches = match_all(&scoped, dets, thresholds)?;
    let distance: BTreeMap<&str, f64> = manifest.scenes.iter().map(|e| (e.scene_id.as_str(), e.distance_m)).collect();
    Ok(matches
        .into_iter()
        .map(|m| SceneRecord {
            distance_m: distance[m.image_id.as_str()],
            matches: m,
        })
        .collect())
}

/// AP curve from per-scene records, one point per distance in `distances`.
pub fn curve_from_records(
    camera_id: &str,
    condition: Illumination,
    distances: &[f64],
    records: &[SceneRecord],
    n_thresholds: usize,
) -> Result<APCurve> {
    let mut points = Vec::with_capacity(distances.len());
    for &d in distances {
        let part: Vec<&ImageMatches> = records.iter().filter(|r| r.distance_m == d).map(|r| &r.matches).collect();
        if part.is_empty() {
            return Err(Error::Data(format!("no images at distance {d} m")));
        }
        let ap = mean(&ap_from_matches(&part, n_thresholds)?);
        points.push(ApPoint {
            distance_m: d,
            ap,
            n_scenes: part.len(),
        });
    }
    Ok(APCurve {
        camera_id: camera_id.to_string(),
        condition,
        points,
    })
}

/// Single condition shared by every manifest entry.
pub fn manifest_condition(manifest: &SceneManifest) -> Result<Illumination> {
    let first = manifest
        .scenes
        .first()
        .ok_or_else(|| Error::Data(format!("manifest {} has no scenes", manifest.collection)))?
        .illumination;
    if manifest.scenes.iter().any(|e| e.illumination != first) {
        return Err(Error::Data(format!("manifest {} mixes illumination conditions", manifest.collection)));
    }
    Ok(first)
}

/// AP at each manifest distance with the default thresholds.
pub fn ap_by_distance(manifest: &SceneManifest, camera_id: &str, gt: &GroundTruthSet, dets: &DetectionSet) -> Result<APCurve> {
    let distances = manifest.distances();
    if distances.is_empty() {
        return Err(Error::Data("manifest has no distances".into()));
    }
    let condition = manifest_condition(manifest)?;
    let records = scene_records(manifest, gt, dets, &COCO_THRESHOLDS)?;
    curve_from_records(camera_id, condition, &distances, &records, COCO_THRESHOLDS.len())
}

pub const CURVE_CSV_HEADER: [&str; 5] = ["camera_id", "condition", "distance_m", "ap", "n_scenes"];

/// Writes curves as CSV rows in the given order.
pub fn curves_to_csv<W: Write>(curves: &[APCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_CSV_HEADER)?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.camera_id.clone(),
                c.condition.label(),
                p.distance_m.to_string(),
                p.ap.to_string(),
                p.n_scenes.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn curves_csv_bytes(curves: &[APCurve]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    curves_to_csv(curves, &mut buf)?;
    Ok(buf)
}

/// Parses a condition label written by [`Illumination::label`].
pub fn parse_condition(label: &str) -> Result<Illumination> {
    match label {
        "day" => Ok(Illumination::Day),
        "night" => Ok(Illumination::Night),
        _ => label
            .strip_prefix("lux_")
            .and_then(|v| v.parse::<f64>().ok())
            .filter(|v| v.is_finite() && *v > 0.0)
            .map(Illumination::Lux)
            .ok_or_else(|| Error::Data(format!("unknown condition `{label}`"))),
    }
}

/// Reads CSV written by [`curves_to_csv`]; rows sharing (camera, condition)
/// form one curve, in first-seen order.
pub fn curves_from_csv(bytes: &[u8]) -> Result<Vec<APCurve>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CURVE_CSV_HEADER {
        return Err(Error::Data(format!("unexpected curve CSV header {header:?}")));
    }
    let mut curves: Vec<APCurve> = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("bad number `{}` in curve CSV", &row[i])))
        };
        let condition = parse_condition(&row[1])?;
        let point = ApPoint {
            distance_m: num(2)?,
            ap: num(3)?,
            n_scenes: row[4]
                .parse()
                .map_err(|_| Error::Data(format!("bad count `{}` in curve CSV", &row[4])))?,
        };
        match curves.iter_mut().find(|c| c.camera_id == row[0] && c.condition == condition) {
            Some(c) => c.points.push(point),
            None => curves.push(APCurve {
                camera_id: row[0].to_string(),
                condition,
                points: vec![point],
            }),
        }
    }
    for c in &curves {
        c.validate()?;
    }
    Ok(curves)
}

pub const RECORDS_CSV_HEADER: [&str; 8] = ["image_id", "distance_m", "n_gt", "det_index", "score", "iou_threshold", "tp", "gt_index"];

/// One CSV row per (detection, threshold). An image without detections
/// gets one row per threshold with the detection fields empty, so its
/// ground truth count and the thresholds survive a round trip.
pub fn records_to_csv<W: Write>(records: &[SceneRecord], thresholds: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORDS_CSV_HEADER)?;
    for rec in records {
        let m = &rec.matches;
        let head = [m.image_id.clone(), rec.distance_m.to_string(), m.n_gt.to_string()];
        if m.detections.is_empty() {
            for t in thresholds {
                w.write_record(head.iter().cloned().chain([String::new(), String::new(), t.to_string(), String::new(), String::new()]))?;
            }
        }
        for d in &m.detections {
            for (t, g) in thresholds.iter().zip(&d.matched) {
                w.write_record(head.iter().cloned().chain([
                    d.det_index.to_string(),
                    d.score.to_string(),
                    t.to_string(),
                    (g.is_some() as u8).to_string(),
                    g.map_or(String::new(), |g| g.to_string()),
                ]))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Inverse of [`records_to_csv`]; also returns the thresholds in file
/// order.
pub fn records_from_csv(bytes: &[u8]) -> Result<(Vec<SceneRecord>, Vec<f64>)> {
    let mut r = csv::Reader::from_reader(bytes);
    if r.headers()?.iter().collect::<Vec<_>>() != RECORDS_CSV_HEADER {
        return Err(Error::Data("unexpected match-record CSV header".into()));
    }
    let bad = |what: &str, v: &str| Error::Data(format!("bad {what} `{v}` in match-record CSV"));
    let mut records: Vec<SceneRecord> = Vec::new();
    let mut thresholds: Vec<f64> = Vec::new();
    let mut check_threshold = |k: usize, t: f64, image: &str| match thresholds.get(k) {
        Some(&e) if e != t => Err(Error::Data(format!("threshold {t} out of order for image {image}"))),
        None => {
            thresholds.push(t);
            Ok(())
        }
        _ => Ok(()),
    };
    let mut empty_rows = 0;
    for row in r.records() {
        let row = row?;
        let distance_m: f64 = row[1].parse().map_err(|_| bad("distance", &row[1]))?;
        let n_gt: usize = row[2].parse().map_err(|_| bad("count", &row[2]))?;
        if records.last().is_none_or(|l| l.matches.image_id != row[0]) {
            if records.iter().any(|l| l.matches.image_id == row[0]) {
                return Err(Error::Data(format!("rows of image {} are not contiguous", &row[0])));
            }
            records.push(SceneRecord {
                distance_m,
                matches: ImageMatches { image_id: row[0].to_string(), n_gt, detections: Vec::new() },
            });
            empty_rows = 0;
        }
        let rec = records.last_mut().unwrap();
        if rec.distance_m != distance_m || rec.matches.n_gt != n_gt {
            return Err(Error::Data(format!("inconsistent rows for image {}", &row[0])));
        }
        let t: f64 = row[5].parse().map_err(|_| bad("threshold", &row[5]))?;
        if row[3].is_empty() {
            if !rec.matches.detections.is_empty() {
                return Err(Error::Data(format!("empty detection row among detections of image {}", &row[0])));
            }
            check_threshold(empty_rows, t, &row[0])?;
            empty_rows += 1;
            continue;
        }
        if empty_rows > 0 {
            return Err(Error::Data(format!("detection row after empty rows for image {}", &row[0])));
        }
        let det_index: usize = row[3].parse().map_err(|_| bad("detection index", &row[3]))?;
        let score: f64 = row[4].parse().map_err(|_| bad("score", &row[4]))?;
        let gt = if row[7].is_empty() { None } else { Some(row[7].parse::<usize>().map_err(|_| bad("gt index", &row[7]))?) };
        if (&row[6] == "1") != gt.is_some() {
            return Err(Error::Data(format!("tp flag disagrees with gt index for image {}", &row[0])));
        }
        let dets = &mut rec.matches.detections;
        if dets.last().is_none_or(|d| d.det_index != det_index) {
            dets.push(MatchedDetection { det_index, score, matched: Vec::new() });
        }
        let d = dets.last_mut().unwrap();
        check_threshold(d.matched.len(), t, &row[0])?;
        d.matched.push(gt);
    }
    let n = thresholds.len();
    if records.iter().flat_map(|r| &r.matches.detections).any(|d| d.matched.len() != n) {
        return Err(Error::Data("detections with differing threshold counts".into()));
    }
    Ok((records, thresholds))
}

pub fn save_records(records: &[SceneRecord], thresholds: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    records_to_csv(records, thresholds, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;

    fn det(id: &str, b: BBox, score: f64) -> Detection {
        Detection {
            image_id: id.into(),
            bbox: b,
            score,
            category: "car".into(),
        }
    }

    fn one_gt() -> GroundTruthSet {
        GroundTruthSet::from([("a".to_string(), vec![BBox::new(0.0, 0.0, 10.0, 10.0)])])
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_detection() {
        let mut d = DetectionSet::new("t");
        d.detections.push(det("a", BBox::new(0.0, 0.0, 10.0, 10.0), 0.9));
        assert_eq!(coco_ap(&one_gt(), &d, &COCO_THRESHOLDS).unwrap(), 1.0);
    }

    #[test]
    fn iou_060_passes_three_thresholds() {
        // 10x10 vs 10x6 inside it: IoU 0.6
        let mut d = DetectionSet::new("t");
        d.detections.push(det("a", BBox::new(0.0, 0.0, 10.0, 6.0), 0.9));
        assert_eq!(coco_ap(&one_gt(), &d, &COCO_THRESHOLDS).unwrap(), 0.3);
    }

    #[test]
    fn no_detections() {
        assert_eq!(coco_ap(&one_gt(), &DetectionSet::new("t"), &COCO_THRESHOLDS).unwrap(), 0.0);
    }

    #[test]
    fn empty_ground_truth_is_undefined() {
        let gt = GroundTruthSet::from([("a".to_string(), vec![])]);
        assert!(matches!(coco_ap(&gt, &DetectionSet::new("t"), &COCO_THRESHOLDS), Err(Error::UndefinedAp(_))));
    }

    #[test]
    fn unknown_image_rejected() {
        let mut d = DetectionSet::new("t");
        d.detections.push(det("zzz", BBox::new(0.0, 0.0, 1.0, 1.0), 0.5));
        assert!(matches!(coco_ap(&one_gt(), &d, &COCO_THRESHOLDS), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn false_positive_ahead_halves_precision() {
        let mut d = DetectionSet::new("t");
        d.detections.push(det("a", BBox::new(50.0, 50.0, 10.0, 10.0), 0.9));
        d.detections.push(det("a", BBox::new(0.0, 0.0, 10.0, 10.0), 0.8));
        assert_eq!(coco_ap(&one_gt(), &d, &[0.5]).unwrap(), 0.5);
        // reversed scores: the TP ranks first
        d.detections[0].score = 0.1;
        assert_eq!(coco_ap(&one_gt(), &d, &[0.5]).unwrap(), 1.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let m = match_image(
            "a",
            &[BBox::new(0.0, 0.0, 10.0, 10.0)],
            &[(BBox::new(0.0, 0.0, 10.0, 10.0), 0.5), (BBox::new(0.0, 0.0, 10.0, 10.0), 0.5)],
            &[0.5],
        );
        assert_eq!(m.detections[0].matched, vec![Some(0)]);
        assert_eq!(m.detections[1].matched, vec![None]);
    }

    #[test]
    fn csv_round_trip() {
        let curve = APCurve {
            camera_id: "p1.4_f2.4".into(),
            condition: Illumination::Lux(0.1),
            points: vec![
                ApPoint { distance_m: 25.0, ap: 0.1 + 0.2, n_scenes: 10 },
                ApPoint { distance_m: 50.0, ap: 1.0 / 3.0, n_scenes: 10 },
            ],
        };
        let bytes = curves_csv_bytes(&[curve.clone()]).unwrap();
        assert_eq!(curves_from_csv(&bytes).unwrap(), vec![curve]);
    }

    #[test]
    fn condition_labels_parse() {
        for c in [Illumination::Day, Illumination::Night, Illumination::Lux(12.5)] {
            assert_eq!(parse_condition(&c.label()).unwrap(), c);
        }
        assert!(parse_condition("dusk").is_err());
    }

    #[test]
    fn records_csv_round_trip() {
        let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let recs = vec![
            SceneRecord { distance_m: 25.0, matches: match_image("a", &gt, &[(BBox::new(1.0, 0.0, 10.0, 10.0), 0.7), (BBox::new(40.0, 0.0, 5.0, 5.0), 0.2)], &COCO_THRESHOLDS) },
            SceneRecord { distance_m: 50.0, matches: match_image("b", &gt, &[], &COCO_THRESHOLDS) },
        ];
        let mut buf = Vec::new();
        records_to_csv(&recs, &COCO_THRESHOLDS, &mut buf).unwrap();
        let (back, thr) = records_from_csv(&buf).unwrap();
        assert_eq!(back, recs);
        assert_eq!(thr, COCO_THRESHOLDS.to_vec());
    }
}
