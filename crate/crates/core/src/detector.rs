//! Detection data model, the built-in baseline detector, and ingestion of
//! detections produced elsewhere.
//!
//! The baseline flags pixels whose luma departs from their row's median by
//! more than `k·MAD` and reports 8-connected blobs. It is a stand-in that
//! lets every downstream metric run hermetically, not a car detector.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::isp::RgbImage;
use crate::scene::SceneManifest;

pub const CATEGORY: &str = "car";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSet {
    pub detector: String,
    /// Image ids the detector was run on, including those with no
    /// detections. When absent, an image counts as covered only if it has
    /// at least one detection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<String>>,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(detector: impl Into<String>) -> Self {
        DetectionSet {
            detector: detector.into(),
            images: None,
            detections: Vec::new(),
        }
    }

    /// Fails with a data error naming the first manifest image the set does
    /// not cover.
    pub fn require_coverage(&self, manifest: &SceneManifest) -> Result<()> {
        let covered: BTreeSet<&str> = match &self.images {
            Some(ids) => ids.iter().map(String::as_str).collect(),
            None => self.detections.iter().map(|d| d.image_id.as_str()).collect(),
        };
        match manifest.scenes.iter().find(|e| !covered.contains(e.scene_id.as_str())) {
            Some(e) => Err(Error::Data(format!("{}: missing detections for image {}", self.detector, e.scene_id))),
            None => Ok(()),
        }
    }

    pub fn for_image<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a Detection> + 'a {
        self.detections.iter().filter(move |d| d.image_id == image_id)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Checks boxes, scores and categories; scores in `(1, 1 + 1e-6]` are
    /// clamped to 1 with a warning.
    pub fn validated(mut self, known_ids: Option<&BTreeSet<&str>>) -> Result<Self> {
        if let (Some(ids), Some(images)) = (known_ids, &self.images) {
            if let Some(id) = images.iter().find(|i| !ids.contains(i.as_str())) {
                return Err(Error::UnknownImage(id.clone()));
            }
        }
        for d in &mut self.detections {
            if let Some(ids) = known_ids {
                if !ids.contains(d.image_id.as_str()) {
                    return Err(Error::UnknownImage(d.image_id.clone()));
                }
            }
            let b = d.bbox;
            if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) || !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::InvalidDetection(format!("{}: box {:?} needs w, h > 0", d.image_id, b)));
            }
            if d.category != CATEGORY {
                return Err(Error::InvalidDetection(format!("{}: unsupported category `{}`", d.image_id, d.category)));
            }
            if d.score > 1.0 && d.score <= 1.0 + 1e-6 {
                log::warn!("{}: score {} clamped to 1", d.image_id, d.score);
                d.score = 1.0;
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::InvalidDetection(format!("{}: score {} outside [0, 1]", d.image_id, d.score)));
            }
        }
        Ok(self)
    }
}

pub fn save_detections(set: &DetectionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn parse_detections(bytes: &[u8], manifest: Option<&SceneManifest>) -> Result<DetectionSet> {
    let set: DetectionSet = serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("detections: {e}")))?;
    let ids: Option<BTreeSet<&str>> = manifest.map(|m| m.scenes.iter().map(|e| e.scene_id.as_str()).collect());
    set.validated(ids.as_ref())
}

pub fn load_detections(path: impl AsRef<Path>, manifest: &SceneManifest) -> Result<DetectionSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&bytes, Some(manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    pub k: f64,
    pub min_area: usize,
    /// Lower bound on the MAD as a fraction of the largest |residual|, so
    /// noise-free images still get a threshold.
    pub mad_floor_fraction: f64,
    /// Width the full frame is resized to before detection, as for a
    /// network input; 0 keeps the native resolution. Never upsamples.
    pub input_width_px: usize,
    /// Hot pixels separated by at most this many working pixels join one
    /// blob.
    pub merge_gap_px: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            k: 4.0,
            min_area: 9,
            mad_floor_fraction: 0.02,
            input_width_px: 640,
            merge_gap_px: 1,
        }
    }
}

pub const BASELINE_NAME: &str = "baseline-rowmedian-v1";

/// Rec. 601 luma of an 8-bit RGB image, in DN.
pub fn luma(image: &RgbImage) -> Vec<f64> {
    image
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sort_unstable_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// A detected blob in pixel coordinates, before it is tagged with an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub bbox: BBox,
    pub area: usize,
    pub score: f64,
}

/// Baseline detection on a luma plane.
pub fn detect_luma(luma: &[f64], width: usize, height: usize, params: &BaselineParams) -> Vec<Blob> {
    assert_eq!(luma.len(), width * height);
    let mut residual = vec![0.0; luma.len()];
    let mut scratch = Vec::with_capacity(width);
    for r in 0..height {
        let row = &luma[r * width..(r + 1) * width];
        scratch.clear();
        scratch.extend_from_slice(row);
        let m = median(&mut scratch);
        for (o, v) in residual[r * width..(r + 1) * width].iter_mut().zip(row) {
            *o = v - m;
        }
    }
    let mut abs: Vec<f64> = residual.iter().map(|v| v.abs()).collect();
    let max_abs = abs.iter().cloned().fold(0.0, f64::max);
    let mad = median(&mut abs);
    let mad_eff = mad.max(params.mad_floor_fraction * max_abs);
    let threshold = params.k * mad_eff;
    if !(threshold > 0.0) {
        return Vec::new();
    }

    let hot: Vec<bool> = residual.iter().map(|v| v.abs() > threshold).collect();
    let reach = 1 + params.merge_gap_px as isize;
    let mut seen = vec![false; hot.len()];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..hot.len() {
        if !hot[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        let mut sum = 0.0;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / width, i % width);
            x0 = x0.min(c);
            x1 = x1.max(c);
            y0 = y0.min(r);
            y1 = y1.max(r);
            area += 1;
            sum += residual[i].abs();
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                        continue;
                    }
                    let j = rr as usize * width + cc as usize;
                    if hot[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if area >= params.min_area {
            blobs.push(Blob {
                bbox: BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64),
                area,
                score: {
                    // contrast above threshold, weighted by linear size
                    let x = (sum / area as f64 / threshold - 1.0) * (area as f64).sqrt();
                    x / (1.0 + x)
                },
            });
        }
    }
    blobs
}

/// Box-averages a plane by a factor `s` ≥ 1; output sample `o` covers
/// input samples `floor(o s) .. floor((o + 1) s)`.
pub fn downsample(plane: &[f64], width: usize, height: usize, s: f64) -> (Vec<f64>, usize, usize) {
    let spans = |n: usize| -> Vec<(usize, usize)> {
        let m = ((n as f64 / s) * (1.0 + 1e-12)).floor().max(1.0) as usize;
        (0..m)
            .map(|o| {
                let a = (o as f64 * s).floor() as usize;
                let b = (((o + 1) as f64 * s).floor() as usize).clamp(a + 1, n);
                (a.min(n - 1), b)
            })
            .collect()
    };
    let (xs, ys) = (spans(width), spans(height));
    let mut rows = vec![0.0; xs.len() * height];
    for r in 0..height {
        let src = &plane[r * width..(r + 1) * width];
        for (o, &(a, b)) in xs.iter().enumerate() {
            rows[r * xs.len() + o] = src[a..b].iter().sum::<f64>() / (b - a) as f64;
        }
    }
    let w = xs.len();
    let mut out = vec![0.0; w * ys.len()];
    for (o, &(a, b)) in ys.iter().enumerate() {
        for r in a..b {
            for c in 0..w {
                out[o * w + c] += rows[r * w + c];
            }
        }
        for v in &mut out[o * w..(o + 1) * w] {
            *v /= (b - a) as f64;
        }
    }
    (out, w, ys.len())
}

/// Detection on the luma plane of a crop from a frame `frame_width_px`
/// wide. The plane is resized by the frame's input scale, and boxes are
/// mapped back to crop pixels.
pub fn detect_luma_in_frame(luma: &[f64], width: usize, height: usize, params: &BaselineParams, frame_width_px: usize) -> Vec<Blob> {
    let s = if params.input_width_px == 0 { 1.0 } else { (frame_width_px as f64 / params.input_width_px as f64).max(1.0) };
    if s == 1.0 {
        return detect_luma(luma, width, height, params);
    }
    let (small, w, h) = downsample(luma, width, height, s);
    detect_luma(&small, w, h, params)
        .into_iter()
        .map(|b| Blob {
            bbox: BBox::new(b.bbox.x * s, b.bbox.y * s, b.bbox.w * s, b.bbox.h * s),
            ..b
        })
        .collect()
}

/// Baseline detection on an image that is its own full frame.
pub fn baseline_detect(image: &RgbImage, image_id: &str, params: &BaselineParams) -> Vec<Detection> {
    baseline_detect_in_frame(image, image_id, params, image.width)
}

pub fn baseline_detect_in_frame(image: &RgbImage, image_id: &str, params: &BaselineParams, frame_width_px: usize) -> Vec<Detection> {
    detect_luma_in_frame(&luma(image), image.width, image.height, params, frame_width_px)
        .into_iter()
        .map(|b| Detection {
            image_id: image_id.to_string(),
            bbox: b.bbox,
            score: b.score,
            category: CATEGORY.into(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> Vec<f64> {
        // sky above, road band below, dark rectangles on the road
        let mut luma: Vec<f64> = (0..w * h).map(|i| if i / w < h / 3 { 200.0 } else { 120.0 }).collect();
        for &(x, y, rw, rh) in rects {
            for r in y..y + rh {
                for c in x..x + rw {
                    luma[r * w + c] = 40.0;
                }
            }
        }
        luma
    }

    #[test]
    fn constant_image_has_no_detections() {
        assert!(detect_luma(&vec![77.0; 64 * 48], 64, 48, &BaselineParams::default()).is_empty());
    }

    #[test]
    fn one_rectangle_one_detection() {
        let luma = fixture(96, 64, &[(30, 30, 20, 16)]);
        let blobs = detect_luma(&luma, 96, 64, &BaselineParams::default());
        assert_eq!(blobs.len(), 1);
        assert!(blobs[0].bbox.iou(&BBox::new(30.0, 30.0, 20.0, 16.0)) >= 0.5);
        assert!(blobs[0].score > 0.0 && blobs[0].score <= 1.0);
    }

    #[test]
    fn two_rectangles_two_detections() {
        let luma = fixture(120, 64, &[(10, 30, 20, 16), (60, 34, 20, 16)]);
        assert_eq!(detect_luma(&luma, 120, 64, &BaselineParams::default()).len(), 2);
    }

    #[test]
    fn small_blobs_are_dropped() {
        let luma = fixture(64, 64, &[(20, 40, 2, 4)]);
        assert!(detect_luma(&luma, 64, 64, &BaselineParams::default()).is_empty());
    }

    proptest! {
        #[test]
        fn translation_covariant(dx in 0usize..30, dy in 0usize..18) {
            let base = detect_luma(&fixture(96, 64, &[(10, 28, 20, 16)]), 96, 64, &BaselineParams::default());
            let moved = detect_luma(&fixture(96, 64, &[(10 + dx, 28 + dy, 20, 16)]), 96, 64, &BaselineParams::default());
            prop_assert_eq!(base.len(), 1);
            prop_assert_eq!(moved.len(), 1);
            prop_assert_eq!(moved[0].bbox, base[0].bbox.translated(dx as f64, dy as f64));
        }

        #[test]
        fn affine_luma_keeps_count(a in 0.05f64..20.0, b in -100.0f64..100.0) {
            let luma = fixture(120, 64, &[(10, 30, 20, 16), (60, 34, 20, 16)]);
            let n0 = detect_luma(&luma, 120, 64, &BaselineParams::default()).len();
            let t: Vec<f64> = luma.iter().map(|v| a * v + b).collect();
            prop_assert_eq!(detect_luma(&t, 120, 64, &BaselineParams::default()).len(), n0);
        }
    }

    fn manifest() -> SceneManifest {
        use crate::scene::{plan_collection, CollectionOptions, Illumination};
        let mut opts = CollectionOptions::standard("m", 1, Illumination::Day);
        opts.scenes_per_distance = 1;
        plan_collection(&opts).unwrap()
    }

    #[test]
    fn empty_set_is_valid() {
        let bytes = br#"{"detector": "x", "detections": []}"#;
        let set = parse_detections(bytes, Some(&manifest())).unwrap();
        assert!(set.detections.is_empty());
    }

    #[test]
    fn unknown_image_is_named() {
        let bytes = br#"{"detector": "x", "detections": [{"image_id": "nope", "bbox": [1, 2, 3, 4], "score": 0.5, "category": "car"}]}"#;
        match parse_detections(bytes, Some(&manifest())) {
            Err(Error::UnknownImage(id)) => assert_eq!(id, "nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_boxes_and_scores() {
        let m = manifest();
        let id = &m.scenes[0].scene_id;
        let neg = format!(r#"{{"detector": "x", "detections": [{{"image_id": "{id}", "bbox": [1, 2, -3, 4], "score": 0.5, "category": "car"}}]}}"#);
        assert!(matches!(parse_detections(neg.as_bytes(), Some(&m)), Err(Error::InvalidDetection(_))));
        let near = format!(r#"{{"detector": "x", "detections": [{{"image_id": "{id}", "bbox": [1, 2, 3, 4], "score": 1.0000005, "category": "car"}}]}}"#);
        assert_eq!(parse_detections(near.as_bytes(), Some(&m)).unwrap().detections[0].score, 1.0);
        let far = near.replace("1.0000005", "1.01");
        assert!(parse_detections(far.as_bytes(), Some(&m)).is_err());
        assert!(matches!(parse_detections(b"{", Some(&m)), Err(Error::Data(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let m = manifest();
        let set = DetectionSet {
            detector: BASELINE_NAME.into(),
            images: Some(m.scenes.iter().map(|e| e.scene_id.clone()).collect()),
            detections: vec![
                Detection { image_id: m.scenes[0].scene_id.clone(), bbox: BBox::new(1.5, 2.0, 30.25, 4.0), score: 0.1 + 0.2, category: CATEGORY.into() },
                Detection { image_id: m.scenes[3].scene_id.clone(), bbox: BBox::new(0.0, 0.0, 1.0, 1.0), score: 1.0 / 3.0, category: CATEGORY.into() },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.json");
        save_detections(&set, &p).unwrap();
        assert_eq!(load_detections(&p, &m).unwrap(), set);
        set.require_coverage(&m).unwrap();
    }

    #[test]
    fn coverage_check() {
        let m = manifest();
        let mut set = DetectionSet::new("ext");
        set.detections.push(Detection { image_id: m.scenes[0].scene_id.clone(), bbox: BBox::new(0.0, 0.0, 1.0, 1.0), score: 0.5, category: CATEGORY.into() });
        assert!(matches!(set.require_coverage(&m), Err(Error::Data(_))));
        set.images = Some(m.scenes.iter().map(|e| e.scene_id.clone()).collect());
        set.require_coverage(&m).unwrap();
        set.images.as_mut().unwrap().push("nope".into());
        let ids: BTreeSet<&str> = m.scenes.iter().map(|e| e.scene_id.as_str()).collect();
        assert!(matches!(set.validated(Some(&ids)), Err(Error::UnknownImage(_))));
    }
}
