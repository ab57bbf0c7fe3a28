//! System MTF50 from a slanted edge (ISO 12233 style) or from the
//! analytic optics × pixel-aperture product.

use serde::{Deserialize, Serialize};

use crate::camera::CameraConfig;
use crate::error::{Error, Result};
use crate::isp;
use crate::optics::{apply_optics_owned, cutoff_frequency, diffraction_otf};
use crate::scene::{generate_slanted_edge, EdgeTarget};
use crate::sensor::{self, RawImage};
use crate::spectral::Spd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MtfMode {
    /// Green channel after bilinear demosaicking.
    #[default]
    SlantedEdge,
    /// Raw green photosites only, before demosaicking.
    RawGreen,
    /// Polychromatic diffraction OTF times the pixel-aperture sinc.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtfOptions {
    pub mode: MtfMode,
    pub target: EdgeTarget,
    /// Fixed exposure puts the brightest noise-free pixel at this fraction
    /// of the swing.
    pub exposure_fraction: f64,
    /// Border excluded from edge analysis, in pixels.
    pub margin_px: usize,
    /// Half-width of the edge-spread window, in pixels.
    pub esf_half_width_px: usize,
}

impl Default for MtfOptions {
    fn default() -> Self {
        MtfOptions {
            mode: MtfMode::SlantedEdge,
            target: EdgeTarget::default(),
            exposure_fraction: 0.5,
            margin_px: 8,
            esf_half_width_px: 32,
        }
    }
}

/// ESF oversampling factor.
pub const OVERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mtf50Result {
    pub camera_id: String,
    pub mode: MtfMode,
    pub mtf50_cyc_per_mm: f64,
    pub nyquist_cyc_per_mm: f64,
    /// The 0.5 crossing lies above Nyquist or had to be extrapolated.
    pub extrapolated: bool,
    /// Measured edge tilt from vertical (slanted-edge modes).
    pub edge_angle_deg: Option<f64>,
    /// `(cycles/mm, modulation)` samples.
    pub curve: Vec<(f64, f64)>,
}

pub fn measure_mtf50(camera: &CameraConfig) -> Result<Mtf50Result> {
    measure_mtf50_with(camera, &MtfOptions::default())
}

pub fn measure_mtf50_with(camera: &CameraConfig, opts: &MtfOptions) -> Result<Mtf50Result> {
    camera.validate()?;
    let p_mm = camera.sensor.pixel_mm();
    let nyquist = 0.5 / p_mm;
    if opts.mode == MtfMode::Analytic {
        return Ok(analytic_mtf50(camera));
    }
    let raw = edge_capture(camera, opts)?;
    let samples = match opts.mode {
        MtfMode::RawGreen => {
            let black = raw.black_level as f64;
            let span = raw.full_scale() as f64 - black;
            let norm: Vec<f64> = raw.dn.iter().map(|d| (*d as f64 - black) / span).collect();
            let cfa = raw.cfa;
            edge_rows(&norm, raw.width, raw.height, opts.margin_px, |r, c| cfa.channel(r, c) == 1)
        }
        _ => {
            let rgb = isp::demosaic(&raw)?;
            edge_rows(&rgb.channel(1), raw.width, raw.height, opts.margin_px, |_, _| true)
        }
    };
    let edge = edge_mtf(&samples, opts.esf_half_width_px)?;
    let (f50, extrapolated) = mtf50_from_curve(&edge.freq_cyc_per_px, &edge.mtf, 0.5);
    Ok(Mtf50Result {
        camera_id: camera.id.clone(),
        mode: opts.mode,
        mtf50_cyc_per_mm: f50 / p_mm,
        nyquist_cyc_per_mm: nyquist,
        extrapolated,
        edge_angle_deg: Some(edge.angle_deg),
        curve: edge.freq_cyc_per_px.iter().zip(&edge.mtf).map(|(f, m)| (f / p_mm, *m)).collect(),
    })
}

/// Noise-free raw frame of the edge target at a fixed mid-range exposure.
pub fn edge_capture(camera: &CameraConfig, opts: &MtfOptions) -> Result<RawImage> {
    if !(opts.exposure_fraction > 0.0 && opts.exposure_fraction <= 1.0) {
        return Err(Error::Config(format!("exposure fraction must be in (0, 1], got {}", opts.exposure_fraction)));
    }
    let render = camera.render_config();
    let edge = generate_slanted_edge(&render, &opts.target)?;
    let mut optics = camera.optics.clone();
    optics.relative_illumination = false;
    let (irr, _) = apply_optics_owned(edge, &optics, None)?;
    let sensor = camera.sensor.noise_free();
    let probe = sensor::expected_electrons(&irr, &sensor, camera.policy.probe_exposure)?;
    let g = sensor.conversion_gain * sensor.analog_gain;
    let peak = probe.electrons.iter().fold(0.0f64, |m, e| m.max(*e)) * g;
    if !(peak > 0.0) {
        return Err(Error::DegenerateScene("edge target produced no signal".into()));
    }
    let t = (probe.exposure_time * opts.exposure_fraction * sensor.voltage_swing / peak).min(camera.policy.max_exposure);
    sensor::capture_electrons(&probe.at_exposure(t), &sensor, 0)
}

/// Per-row `(column, value)` samples inside the margin, keeping the sites
/// where `keep(row, col)` holds.
pub fn edge_rows(values: &[f64], width: usize, height: usize, margin: usize, keep: impl Fn(usize, usize) -> bool) -> Vec<(usize, Vec<(f64, f64)>)> {
    let mut rows = Vec::new();
    if width <= 2 * margin || height <= 2 * margin {
        return rows;
    }
    for r in margin..height - margin {
        let line: Vec<(f64, f64)> = (margin..width - margin)
            .filter(|&c| keep(r, c))
            .map(|c| (c as f64, values[r * width + c]))
            .collect();
        rows.push((r, line));
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMtf {
    pub angle_deg: f64,
    /// Cycles per pixel, up to 1.
    pub freq_cyc_per_px: Vec<f64>,
    pub mtf: Vec<f64>,
}

/// Edge centroid of one row from differences of consecutive samples,
/// refined inside `±half` of the first estimate.
fn row_centroid(line: &[(f64, f64)], half: f64) -> Option<f64> {
    let diffs: Vec<(f64, f64)> = line
        .windows(2)
        .map(|p| ((p[0].0 + p[1].0) / 2.0, p[0].1 - p[1].1))
        .collect();
    let centroid = |sel: &dyn Fn(f64) -> bool| {
        let (mut s, mut sw) = (0.0, 0.0);
        for &(x, d) in &diffs {
            if sel(x) {
                s += x * d;
                sw += d;
            }
        }
        (sw.abs() > 0.0).then(|| s / sw)
    };
    let first = centroid(&|_| true)?;
    centroid(&|x| (x - first).abs() <= half)
}

/// Slanted-edge MTF from per-row samples of a near-vertical edge.
pub fn edge_mtf(rows: &[(usize, Vec<(f64, f64)>)], half_width_px: usize) -> Result<EdgeMtf> {
    // edge location per row and a least-squares line x = a + b·r
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|(r, line)| row_centroid(line, half_width_px as f64 / 4.0).map(|x| (*r as f64, x)))
        .collect();
    if pts.len() < 3 {
        return Err(Error::DegenerateScene("too few rows with an edge".into()));
    }
    let n = pts.len() as f64;
    let mr = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let srr: f64 = pts.iter().map(|p| (p.0 - mr).powi(2)).sum();
    let srx: f64 = pts.iter().map(|p| (p.0 - mr) * (p.1 - mx)).sum();
    let b = srx / srr;
    let a = mx - b * mr;
    let cos = 1.0 / (1.0 + b * b).sqrt();

    // 4x-oversampled ESF along the edge normal
    let half = half_width_px as f64;
    let dx = 1.0 / OVERSAMPLE as f64;
    let nb = 2 * half_width_px * OVERSAMPLE;
    let mut sum = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    for (r, line) in rows {
        let xe = a + b * *r as f64;
        for &(c, v) in line {
            let s = (c - xe) * cos;
            let k = ((s + half) / dx).floor();
            if k >= 0.0 && (k as usize) < nb {
                sum[k as usize] += v;
                count[k as usize] += 1;
            }
        }
    }
    let filled: Vec<usize> = (0..nb).filter(|&k| count[k] > 0).collect();
    if filled.len() < nb / 2 {
        return Err(Error::DegenerateScene("edge spread function is too sparse".into()));
    }
    let mut esf: Vec<f64> = (0..nb).map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { f64::NAN }).collect();
    fill_gaps(&mut esf);

    // LSF by central difference, Hamming window, DFT
    let mut lsf = vec![0.0; nb];
    for k in 1..nb - 1 {
        lsf[k] = (esf[k + 1] - esf[k - 1]) / 2.0;
    }
    let mid = nb as f64 / 2.0;
    for (k, v) in lsf.iter_mut().enumerate() {
        *v *= 0.54 + 0.46 * (std::f64::consts::PI * (k as f64 - mid) / mid).cos();
    }
    let n_out = nb / OVERSAMPLE + 1; // up to 1 cycle/pixel
    let mut mag = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let w = -2.0 * std::f64::consts::PI * j as f64 / nb as f64;
        let (re, im) = lsf.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, v)| {
            let t = w * k as f64;
            (re + v * t.cos(), im + v * t.sin())
        });
        mag.push((re * re + im * im).sqrt());
    }
    if !(mag[0] > 0.0) {
        return Err(Error::DegenerateScene("edge has no contrast".into()));
    }
    let freq: Vec<f64> = (0..n_out).map(|j| j as f64 / (nb as f64 * dx)).collect();
    let mtf: Vec<f64> = mag
        .iter()
        .zip(&freq)
        .map(|(m, f)| {
            // undo the central difference's sin(2πfΔ)/(2πfΔ)
            let x = 2.0 * std::f64::consts::PI * f * dx;
            let d = if x == 0.0 { 1.0 } else { x.sin() / x };
            m / mag[0] / d
        })
        .collect();
    Ok(EdgeMtf {
        angle_deg: b.atan().to_degrees(),
        freq_cyc_per_px: freq,
        mtf,
    })
}

fn fill_gaps(v: &mut [f64]) {
    let known: Vec<usize> = (0..v.len()).filter(|&k| !v[k].is_nan()).collect();
    for k in 0..v.len() {
        if !v[k].is_nan() {
            continue;
        }
        let hi = known.partition_point(|&i| i < k);
        v[k] = match (hi.checked_sub(1).map(|i| known[i]), known.get(hi)) {
            (Some(l), Some(&h)) => v[l] + (v[h] - v[l]) * (k - l) as f64 / (h - l) as f64,
            (Some(l), None) => v[l],
            (None, Some(&h)) => v[h],
            (None, None) => 0.0,
        };
    }
}

/// First crossing of `level` by linear interpolation. The flag is set when
/// the crossing lies above `nyquist` or, with no crossing at all, when the
/// last segment is extrapolated.
pub fn mtf50_from_curve(freq: &[f64], mtf: &[f64], nyquist: f64) -> (f64, bool) {
    const LEVEL: f64 = 0.5;
    for i in 1..freq.len() {
        if mtf[i] <= LEVEL && mtf[i - 1] > LEVEL {
            let f = freq[i - 1] + (freq[i] - freq[i - 1]) * (mtf[i - 1] - LEVEL) / (mtf[i - 1] - mtf[i]);
            return (f, f > nyquist);
        }
    }
    let n = freq.len();
    if n < 2 {
        return (freq.first().copied().unwrap_or(0.0), true);
    }
    let slope = (mtf[n - 1] - mtf[n - 2]) / (freq[n - 1] - freq[n - 2]);
    let f = if slope < 0.0 { freq[n - 1] + (LEVEL - mtf[n - 1]) / slope } else { freq[n - 1] };
    (f, true)
}

/// Photon-weighted green-channel MTF: Σλ w(λ)·OTF(f, λ) / Σ w(λ) times
/// |sinc(f·p)|, with w = QE_green · D65 · λ.
pub fn analytic_mtf(camera: &CameraConfig, f_cyc_per_mm: f64) -> f64 {
    let grid = camera.render_config().grid;
    let d65 = Spd::d65(grid);
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, lambda) in grid.wavelengths().enumerate() {
        let w = camera.sensor.qe.at(lambda)[1] * d65.values[k] * lambda;
        num += w * diffraction_otf(f_cyc_per_mm, lambda, camera.optics.f_number);
        den += w;
    }
    let x = std::f64::consts::PI * f_cyc_per_mm * camera.sensor.pixel_mm();
    let sinc = if x == 0.0 { 1.0 } else { x.sin() / x };
    num / den * sinc.abs()
}

fn analytic_mtf50(camera: &CameraConfig) -> Mtf50Result {
    let p_mm = camera.sensor.pixel_mm();
    let nyquist = 0.5 / p_mm;
    let steps = 2000;
    let f_max = 2.0 * nyquist;
    let freq: Vec<f64> = (0..=steps).map(|i| f_max * i as f64 / steps as f64).collect();
    let mtf: Vec<f64> = freq.iter().map(|&f| analytic_mtf(camera, f)).collect();
    let (f50, extrapolated) = mtf50_from_curve(&freq, &mtf, nyquist);
    Mtf50Result {
        camera_id: camera.id.clone(),
        mode: MtfMode::Analytic,
        mtf50_cyc_per_mm: f50,
        nyquist_cyc_per_mm: nyquist,
        extrapolated,
        edge_angle_deg: None,
        curve: freq.into_iter().zip(mtf).collect(),
    }
}

/// Diffraction cutoff at the photon-weighted mean wavelength of the green
/// channel, an upper bound for any system MTF50.
pub fn green_cutoff(camera: &CameraConfig) -> f64 {
    let grid = camera.render_config().grid;
    let d65 = Spd::d65(grid);
    let (mut s, mut sw) = (0.0, 0.0);
    for (k, lambda) in grid.wavelengths().enumerate() {
        let w = camera.sensor.qe.at(lambda)[1] * d65.values[k] * lambda;
        s += w * lambda;
        sw += w;
    }
    cutoff_frequency(s / sw, camera.optics.f_number)
}
