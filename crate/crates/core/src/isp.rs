//! Raw mosaic to display RGB: black-level removal, bilinear demosaic,
//! white balance / color matrix, gamma and 8-bit quantization.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::RawImage;

/// Linear RGB, normalized so that full scale above black is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRgb {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
}

impl LinearRgb {
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rgb.iter().map(|p| p[c]).collect()
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = self.rgb.len() as f64;
        let mut s = [0.0; 3];
        for p in &self.rgb {
            for c in 0..3 {
                s[c] += p[c];
            }
        }
        s.map(|v| v / n)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RgbMetadata {
    pub scene_id: String,
    pub camera_id: String,
    pub exposure_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved R, G, B.
    pub data: Vec<u8>,
    pub metadata: RgbMetadata,
}

/// Mirror index without repeating the edge sample, so the Bayer parity of
/// the neighbor is preserved.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Bilinear demosaic with mirrored borders.
pub fn demosaic(raw: &RawImage) -> Result<LinearRgb> {
    raw.validate()?;
    let (w, h) = (raw.width, raw.height);
    let black = raw.black_level as f64;
    let span = raw.full_scale() as f64 - black;
    if !(span > 0.0) {
        return Err(Error::InvalidImage("black level at or above full scale".into()));
    }
    let norm: Vec<f64> = raw.dn.iter().map(|d| (*d as f64 - black) / span).collect();
    let cfa = raw.cfa;
    // kernels on the per-channel sample lattice; each sums to 1 over the
    // same-channel samples it covers
    const GREEN: [[f64; 3]; 3] = [[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]];
    const RED_BLUE: [[f64; 3]; 3] = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];

    let rgb: Vec<[f64; 3]> = (0..h)
        .into_par_iter()
        .flat_map_iter(|r| {
            let norm = &norm;
            (0..w).map(move |c| {
                let mut out = [0.0; 3];
                let own = cfa.channel(r, c);
                for (ch, o) in out.iter_mut().enumerate() {
                    if ch == own {
                        *o = norm[r * w + c];
                        continue;
                    }
                    let k = if ch == 1 { &GREEN } else { &RED_BLUE };
                    let mut s = 0.0;
                    for dy in -1isize..=1 {
                        let rr = reflect(r as isize + dy, h);
                        for dx in -1isize..=1 {
                            let cc = reflect(c as isize + dx, w);
                            let wgt = k[(dy + 1) as usize][(dx + 1) as usize];
                            if wgt != 0.0 && cfa.channel(rr, cc) == ch {
                                s += wgt * norm[rr * w + cc];
                            }
                        }
                    }
                    *o = s;
                }
                out
            })
        })
        .collect();
    Ok(LinearRgb { width: w, height: h, rgb })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorTransform {
    /// Diagonal gains mapping each channel's image mean to `target`.
    GrayWorld { target: f64 },
    Matrix([[f64; 3]; 3]),
}

impl Default for ColorTransform {
    fn default() -> Self {
        ColorTransform::GrayWorld { target: 0.18 }
    }
}

/// Largest gray-world gain; keeps all-dark frames from blowing up noise.
pub const MAX_GAIN: f64 = 1.0e4;

impl ColorTransform {
    pub fn matrix_for(&self, image: &LinearRgb) -> Result<[[f64; 3]; 3]> {
        let m = match self {
            ColorTransform::GrayWorld { target } => {
                if !(*target > 0.0) {
                    return Err(Error::Config(format!("gray-world target must be > 0, got {target}")));
                }
                let means = image.channel_means();
                let g = means.map(|m| if m > 0.0 { (target / m).min(MAX_GAIN) } else { 1.0 });
                [[g[0], 0.0, 0.0], [0.0, g[1], 0.0], [0.0, 0.0, g[2]]]
            }
            ColorTransform::Matrix(m) => *m,
        };
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let scale = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
        if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(3) || scale == 0.0 {
            return Err(Error::Config("color matrix is singular".into()));
        }
        Ok(m)
    }
}

/// Display encoding of one linear value.
pub fn encode_display(x: f64, gamma: f64) -> u8 {
    let x = x.clamp(0.0, 1.0);
    (255.0 * x.powf(1.0 / gamma)).round() as u8
}

pub fn render_display(image: &LinearRgb, transform: &ColorTransform, gamma: f64, metadata: RgbMetadata) -> Result<RgbImage> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be > 0, got {gamma}")));
    }
    let m = transform.matrix_for(image)?;
    let data: Vec<u8> = image
        .rgb
        .par_iter()
        .flat_map_iter(|p| {
            (0..3).map(move |r| encode_display(m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2], gamma))
        })
        .collect();
    Ok(RgbImage {
        width: image.width,
        height: image.height,
        data,
        metadata,
    })
}

pub const DEFAULT_GAMMA: f64 = 2.2;

/// Default chain: demosaic, gray-world balance, gamma 2.2.
pub fn process(raw: &RawImage, metadata: RgbMetadata) -> Result<RgbImage> {
    let lin = demosaic(raw)?;
    render_display(&lin, &ColorTransform::default(), DEFAULT_GAMMA, metadata)
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(out)
    }

    /// Writes the PNG and a `.json` sidecar with the metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_png()?).map_err(|e| Error::io(path, e))?;
        let side = path.with_extension("json");
        let mut json = serde_json::to_vec_pretty(&self.metadata)?;
        json.push(b'\n');
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RgbImage> {
        let path = path.as_ref();
        let img = image::open(path)?.to_rgb8();
        let side = path.with_extension("json");
        let metadata = match fs::read(&side) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RgbMetadata::default(),
            Err(e) => return Err(Error::io(&side, e)),
        };
        Ok(RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw(),
            metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::CfaPattern;

    fn raw(w: usize, h: usize, dn: Vec<u16>) -> RawImage {
        RawImage {
            width: w,
            height: h,
            cfa: CfaPattern::Rggb,
            bit_depth: 10,
            black_level: 64,
            exposure_time: 0.01,
            saturated_fraction: 0.0,
            dn,
        }
    }

    #[test]
    fn uniform_field_stays_uniform() {
        let img = demosaic(&raw(7, 5, vec![500; 35])).unwrap();
        let want = (500.0 - 64.0) / (1023.0 - 64.0);
        for p in &img.rgb {
            for v in p {
                assert!((v - want).abs() < 1e-15);
            }
        }
        let dark = demosaic(&raw(4, 4, vec![64; 16])).unwrap();
        assert!(dark.rgb.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn single_green_pixel_spreads_bilinearly() {
        // RGGB: (2, 3) is a green site in a red row
        let (w, h) = (8, 8);
        let mut dn = vec![64; w * h];
        dn[2 * w + 3] = 1023;
        let img = demosaic(&raw(w, h, dn)).unwrap();
        let g = |r: usize, c: usize| img.rgb[r * w + c][1];
        assert_eq!(g(2, 3), 1.0);
        for (r, c) in [(1, 3), (3, 3), (2, 2), (2, 4)] {
            assert_eq!(g(r, c), 0.25, "({r}, {c})");
        }
        for (r, c) in [(1, 2), (3, 4), (0, 3), (2, 5)] {
            assert_eq!(g(r, c), 0.0, "({r}, {c})");
        }
        assert!(img.rgb.iter().all(|p| p[0] == 0.0 && p[2] == 0.0));
    }

    #[test]
    fn single_red_pixel_spreads_to_neighbors() {
        let (w, h) = (8, 8);
        let mut dn = vec![64; w * h];
        dn[2 * w + 2] = 1023;
        let img = demosaic(&raw(w, h, dn)).unwrap();
        let r = |y: usize, x: usize| img.rgb[y * w + x][0];
        assert_eq!(r(2, 3), 0.5);
        assert_eq!(r(3, 2), 0.5);
        assert_eq!(r(3, 3), 0.25);
        assert_eq!(r(1, 1), 0.25);
    }

    #[test]
    fn display_quantization() {
        let ident = ColorTransform::Matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let img = LinearRgb { width: 1, height: 4, rgb: vec![[0.5; 3], [0.0; 3], [1.0; 3], [3.0; 3]] };
        let out = render_display(&img, &ident, 1.0, RgbMetadata::default()).unwrap();
        assert_eq!(out.data, vec![128, 128, 128, 0, 0, 0, 255, 255, 255, 255, 255, 255]);
        assert_eq!(encode_display(0.18, 2.2), 117);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let img = LinearRgb { width: 1, height: 1, rgb: vec![[0.5; 3]] };
        let m = ColorTransform::Matrix([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(render_display(&img, &m, 2.2, RgbMetadata::default()), Err(Error::Config(_))));
    }

    #[test]
    fn gray_world_equalizes_means() {
        let img = LinearRgb { width: 2, height: 1, rgb: vec![[0.1, 0.2, 0.4], [0.1, 0.2, 0.4]] };
        let m = ColorTransform::default().matrix_for(&img).unwrap();
        assert!((m[0][0] * 0.1 - 0.18).abs() < 1e-15);
        assert!((m[2][2] * 0.4 - 0.18).abs() < 1e-15);
    }

    #[test]
    fn display_is_monotone() {
        let mut last = 0;
        for i in 0..=2000 {
            let v = encode_display(i as f64 / 1000.0, 2.2);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn png_round_trip() {
        let img = RgbImage {
            width: 3,
            height: 2,
            data: (0..18).map(|v| v as u8 * 13).collect(),
            metadata: RgbMetadata { scene_id: "s".into(), camera_id: "c".into(), exposure_time_s: 0.016 },
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        img.save(&p).unwrap();
        assert_eq!(RgbImage::load(&p).unwrap(), img);
        assert_eq!(img.encode_png().unwrap(), img.encode_png().unwrap());
    }
}
