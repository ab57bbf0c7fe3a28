//! Sensor model: pixel integration through a Bayer CFA, exposure policy,
//! photon/dark/read noise and ADC quantization.
//!
//! Electrical defaults approximate a small-pixel mobile CMOS sensor
//! (IMX363 class). They are assumed values, not datasheet values; every
//! field is configurable.

mod poisson;
mod raw;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{SpectralImage, Unit, WaveGrid, LIGHT_SPEED, PLANCK};

pub use poisson::sample as poisson_sample;
pub use raw::RawImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPattern {
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

/// Color channel index: 0 = R, 1 = G, 2 = B.
pub type Channel = usize;

impl CfaPattern {
    pub fn channel(self, row: usize, col: usize) -> Channel {
        let codes: [Channel; 4] = match self {
            CfaPattern::Rggb => [0, 1, 1, 2],
            CfaPattern::Bggr => [2, 1, 1, 0],
            CfaPattern::Grbg => [1, 0, 2, 1],
            CfaPattern::Gbrg => [1, 2, 0, 1],
        };
        codes[(row % 2) * 2 + (col % 2)]
    }

    pub fn code(self) -> &'static str {
        match self {
            CfaPattern::Rggb => "RGGB",
            CfaPattern::Bggr => "BGGR",
            CfaPattern::Grbg => "GRBG",
            CfaPattern::Gbrg => "GBRG",
        }
    }

    pub fn from_code(code: &str) -> Result<Self> {
        match code.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            other => Err(Error::Config(format!("unknown CFA pattern `{other}`"))),
        }
    }
}

/// Spectral quantum efficiency of the three CFA channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantumEfficiency {
    /// Gaussian curves, `[R, G, B]`.
    Gaussian {
        peak: [f64; 3],
        center_nm: [f64; 3],
        sigma_nm: [f64; 3],
    },
    /// Tabulated curves, linearly interpolated, zero outside the table.
    Table {
        wavelength_nm: Vec<f64>,
        qe: Vec<[f64; 3]>,
    },
}

impl Default for QuantumEfficiency {
    fn default() -> Self {
        QuantumEfficiency::Gaussian {
            peak: [0.6; 3],
            center_nm: [600.0, 530.0, 470.0],
            sigma_nm: [50.0; 3],
        }
    }
}

impl QuantumEfficiency {
    pub fn at(&self, lambda_nm: f64) -> [f64; 3] {
        match self {
            QuantumEfficiency::Gaussian {
                peak,
                center_nm,
                sigma_nm,
            } => std::array::from_fn(|c| {
                let z = (lambda_nm - center_nm[c]) / sigma_nm[c];
                peak[c] * (-0.5 * z * z).exp()
            }),
            QuantumEfficiency::Table { wavelength_nm, qe } => {
                let n = wavelength_nm.len();
                if n == 0 || lambda_nm < wavelength_nm[0] || lambda_nm > wavelength_nm[n - 1] {
                    return [0.0; 3];
                }
                let i = wavelength_nm.partition_point(|w| *w <= lambda_nm).min(n - 1).max(1);
                let (l0, l1) = (wavelength_nm[i - 1], wavelength_nm[i]);
                let t = if l1 > l0 { (lambda_nm - l0) / (l1 - l0) } else { 0.0 };
                std::array::from_fn(|c| qe[i - 1][c] * (1.0 - t) + qe[i][c] * t)
            }
        }
    }

    /// Reads `wavelength_nm,qe_r,qe_g,qe_b` CSV (header row required).
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let mut wavelength_nm = Vec::new();
        let mut qe = Vec::new();
        for rec in reader.deserialize::<(f64, f64, f64, f64)>() {
            let (l, r, g, b) = rec?;
            if let Some(prev) = wavelength_nm.last() {
                if l <= *prev {
                    return Err(Error::Config(format!("{}: wavelengths must increase", path.display())));
                }
            }
            for v in [r, g, b] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("{}: QE {v} outside [0, 1]", path.display())));
                }
            }
            wavelength_nm.push(l);
            qe.push([r, g, b]);
        }
        if wavelength_nm.len() < 2 {
            return Err(Error::Config(format!("{}: need at least two QE rows", path.display())));
        }
        Ok(QuantumEfficiency::Table { wavelength_nm, qe })
    }

    pub fn to_csv(&self, grid: WaveGrid) -> String {
        let mut out = String::from("wavelength_nm,qe_r,qe_g,qe_b\n");
        for l in grid.wavelengths() {
            let q = self.at(l);
            out.push_str(&format!("{l},{},{},{}\n", q[0], q[1], q[2]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub pixel_size_um: f64,
    pub die_mm: [f64; 2],
    pub fill_factor: f64,
    pub qe: QuantumEfficiency,
    pub cfa: CfaPattern,
    /// e⁻
    pub well_capacity: f64,
    /// V/e⁻
    pub conversion_gain: f64,
    /// V
    pub voltage_swing: f64,
    /// e⁻ rms
    pub read_noise: f64,
    /// e⁻/s
    pub dark_current: f64,
    /// DN
    pub black_level: u32,
    pub bit_depth: u32,
    pub analog_gain: f64,
    /// Poisson photon noise on/off.
    pub shot_noise: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            pixel_size_um: 1.4,
            die_mm: [5.64, 4.23],
            fill_factor: 1.0,
            qe: QuantumEfficiency::default(),
            cfa: CfaPattern::Rggb,
            well_capacity: 6000.0,
            conversion_gain: 1.0 / 6000.0,
            voltage_swing: 1.0,
            read_noise: 1.5,
            dark_current: 0.1,
            black_level: 64,
            bit_depth: 10,
            analog_gain: 1.0,
            shot_noise: true,
        }
    }
}

impl SensorConfig {
    pub fn with_pixel_size(pixel_size_um: f64) -> Self {
        SensorConfig {
            pixel_size_um,
            ..Default::default()
        }
    }

    /// Same sensor with photon, read and dark noise switched off.
    pub fn noise_free(&self) -> Self {
        SensorConfig {
            shot_noise: false,
            read_noise: 0.0,
            dark_current: 0.0,
            ..self.clone()
        }
    }

    pub fn pixel_mm(&self) -> f64 {
        self.pixel_size_um * 1e-3
    }

    /// Pixel counts `(columns, rows)` on the die.
    pub fn resolution(&self) -> (usize, usize) {
        let p = self.pixel_mm();
        // tolerate die sizes that are exact pixel multiples up to rounding
        let n = |d: f64| ((d / p) * (1.0 + 1e-12)).floor() as usize;
        (n(self.die_mm[0]), n(self.die_mm[1]))
    }

    pub fn full_scale_dn(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pixel_size_um", self.pixel_size_um),
            ("die width", self.die_mm[0]),
            ("die height", self.die_mm[1]),
            ("well_capacity", self.well_capacity),
            ("conversion_gain", self.conversion_gain),
            ("voltage_swing", self.voltage_swing),
            ("analog_gain", self.analog_gain),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.fill_factor > 0.0 && self.fill_factor <= 1.0) {
            return Err(Error::Config(format!("fill_factor must be in (0, 1], got {}", self.fill_factor)));
        }
        if self.read_noise < 0.0 || self.dark_current < 0.0 {
            return Err(Error::Config("noise parameters must be >= 0".into()));
        }
        if self.well_capacity * self.conversion_gain > self.voltage_swing * (1.0 + 1e-9) {
            return Err(Error::Config(format!(
                "well capacity x conversion gain ({:.4} V) exceeds the voltage swing ({} V)",
                self.well_capacity * self.conversion_gain,
                self.voltage_swing
            )));
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::Config(format!("bit depth must be 1..=16, got {}", self.bit_depth)));
        }
        if self.black_level >= self.full_scale_dn() {
            return Err(Error::Config("black level must be below full scale".into()));
        }
        let (w, h) = self.resolution();
        if w == 0 || h == 0 {
            return Err(Error::Config("pixel larger than the die".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExposurePolicy {
    /// Fraction of the voltage swing targeted by the central-region peak.
    pub target_fraction: f64,
    /// s
    pub max_exposure: f64,
    /// Side of the central metering window as a fraction of width/height.
    pub central_fraction: f64,
    /// s
    pub probe_exposure: f64,
}

impl Default for ExposurePolicy {
    fn default() -> Self {
        ExposurePolicy {
            target_fraction: 0.90,
            max_exposure: 0.016,
            central_fraction: 1.0 / 3.0,
            probe_exposure: 1e-3,
        }
    }
}

impl ExposurePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return Err(Error::Config(format!("target_fraction must be in (0, 1), got {}", self.target_fraction)));
        }
        if !(self.max_exposure > 0.0) || !(self.probe_exposure > 0.0) {
            return Err(Error::Config("exposure times must be > 0".into()));
        }
        if !(self.central_fraction > 0.0 && self.central_fraction <= 1.0) {
            return Err(Error::Config("central_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Half-open `(row0, row1, col0, col1)` bounds of the metering window.
    pub fn central_window(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let span = |n: usize| {
            let len = ((n as f64 * self.central_fraction).round() as usize).clamp(1, n);
            let start = (n - len) / 2;
            (start, start + len)
        };
        let (r0, r1) = span(height);
        let (c0, c1) = span(width);
        (r0, r1, c0, c1)
    }
}

/// Mean photo-electrons per pixel (dark current excluded) for one exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectronImage {
    pub width: usize,
    pub height: usize,
    pub cfa: CfaPattern,
    /// s
    pub exposure_time: f64,
    pub electrons: Vec<f64>,
}

impl ElectronImage {
    /// Rescales to a different exposure time.
    pub fn at_exposure(&self, t: f64) -> ElectronImage {
        let k = t / self.exposure_time;
        ElectronImage {
            exposure_time: t,
            electrons: self.electrons.iter().map(|e| e * k).collect(),
            ..self.clone()
        }
    }
}

/// Integer supersampling factor between an irradiance grid and the pixel pitch.
pub fn supersample_factor(sample_pitch_mm: f64, pixel_mm: f64) -> Result<usize> {
    let ratio = pixel_mm / sample_pitch_mm;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-6 * ratio {
        return Err(Error::Sampling(format!(
            "sample pitch {sample_pitch_mm} mm does not divide the pixel pitch {pixel_mm} mm"
        )));
    }
    Ok(n as usize)
}

/// Per-pixel expected photo-electrons at exposure `t` seconds.
pub fn expected_electrons(irradiance: &SpectralImage, sensor: &SensorConfig, t: f64) -> Result<ElectronImage> {
    irradiance.require_unit(Unit::Irradiance)?;
    let mut acc = ElectronAccumulator::new(irradiance.width(), irradiance.height(), irradiance.sample_pitch_mm(), irradiance.grid(), sensor, t)?;
    for k in 0..irradiance.n_wave() {
        acc.add_band(k, irradiance.band(k));
    }
    Ok(acc.finish())
}

/// Builds an [`ElectronImage`] from irradiance bands supplied one at a time,
/// in band order.
pub struct ElectronAccumulator {
    ss: usize,
    w: usize,
    pw: usize,
    ph: usize,
    cfa: CfaPattern,
    t: f64,
    /// photons per (W·m⁻²·nm⁻¹) per band and channel, QE-weighted
    weights: Vec<[f64; 3]>,
    electrons: Vec<f64>,
}

impl ElectronAccumulator {
    pub fn new(w: usize, h: usize, sample_pitch_mm: f64, grid: WaveGrid, sensor: &SensorConfig, t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("exposure must be > 0, got {t}")));
        }
        sensor.validate()?;
        let ss = supersample_factor(sample_pitch_mm, sensor.pixel_mm())?;
        if w % ss != 0 || h % ss != 0 {
            return Err(Error::Sampling(format!(
                "irradiance size {w}x{h} is not a whole number of {ss}x{ss} pixel footprints"
            )));
        }
        let area_m2 = (sensor.pixel_size_um * 1e-6).powi(2);
        let hc = PLANCK * LIGHT_SPEED;
        let weights = grid
            .wavelengths()
            .map(|l| {
                let q = sensor.qe.at(l);
                let photon = l * 1e-9 / hc * grid.step * area_m2 * sensor.fill_factor * t;
                [q[0] * photon, q[1] * photon, q[2] * photon]
            })
            .collect();
        let (pw, ph) = (w / ss, h / ss);
        Ok(ElectronAccumulator {
            ss,
            w,
            pw,
            ph,
            cfa: sensor.cfa,
            t,
            weights,
            electrons: vec![0.0; pw * ph],
        })
    }

    /// Box-integrates band `k` over each pixel footprint and adds its
    /// channel-weighted photo-electrons.
    pub fn add_band(&mut self, k: usize, band: &[f64]) {
        let (ss, w, pw) = (self.ss, self.w, self.pw);
        let wk = self.weights[k];
        let cfa = self.cfa;
        let inv_block = 1.0 / (ss * ss) as f64;
        self.electrons.par_chunks_mut(pw).enumerate().for_each(|(pr, row)| {
            let mut sums = vec![0.0; pw];
            for sr in pr * ss..(pr + 1) * ss {
                let line = &band[sr * w..(sr + 1) * w];
                for (pc, s) in sums.iter_mut().enumerate() {
                    *s += line[pc * ss..(pc + 1) * ss].iter().sum::<f64>();
                }
            }
            for (pc, (e, s)) in row.iter_mut().zip(&sums).enumerate() {
                *e += wk[cfa.channel(pr, pc)] * s * inv_block;
            }
        });
    }

    pub fn finish(self) -> ElectronImage {
        ElectronImage {
            width: self.pw,
            height: self.ph,
            cfa: self.cfa,
            exposure_time: self.t,
            electrons: self.electrons,
        }
    }
}

/// Noise-free pixel voltage (V) including mean dark charge, with the
/// full-well and swing limits applied.
pub fn noise_free_voltage(electrons: &ElectronImage, sensor: &SensorConfig, t: f64) -> Vec<f64> {
    let e = electrons.at_exposure(t);
    let g = sensor.conversion_gain * sensor.analog_gain;
    e.electrons
        .iter()
        .map(|x| ((x + sensor.dark_current * t).min(sensor.well_capacity) * g).min(sensor.voltage_swing))
        .collect()
}

/// Maximum of `values` over the policy's central window.
pub fn central_peak(values: &[f64], width: usize, height: usize, policy: &ExposurePolicy) -> f64 {
    let (r0, r1, c0, c1) = policy.central_window(width, height);
    let mut peak = 0.0f64;
    for r in r0..r1 {
        for v in &values[r * width + c0..r * width + c1] {
            peak = peak.max(*v);
        }
    }
    peak
}

/// Exposure time putting the noise-free central-region peak voltage at
/// `target_fraction` of the swing, capped at `max_exposure`.
pub fn auto_exposure(irradiance: &SpectralImage, sensor: &SensorConfig, policy: &ExposurePolicy) -> Result<f64> {
    policy.validate()?;
    let probe = expected_electrons(irradiance, sensor, policy.probe_exposure)?;
    Ok(auto_exposure_from_electrons(&probe, sensor, policy))
}

/// [`auto_exposure`] on a precomputed electron image.
pub fn auto_exposure_from_electrons(probe: &ElectronImage, sensor: &SensorConfig, policy: &ExposurePolicy) -> f64 {
    let t0 = probe.exposure_time;
    let g = sensor.conversion_gain * sensor.analog_gain;
    // linear (unclipped) voltage so the rescaling is exact
    let volts: Vec<f64> = probe
        .electrons
        .iter()
        .map(|e| (e + sensor.dark_current * t0) * g)
        .collect();
    let peak = central_peak(&volts, probe.width, probe.height, policy);
    if !(peak > 0.0) {
        return policy.max_exposure;
    }
    (t0 * policy.target_fraction * sensor.voltage_swing / peak).min(policy.max_exposure)
}

/// Simulates one raw frame at exposure `t` seconds.
pub fn capture(irradiance: &SpectralImage, sensor: &SensorConfig, t: f64, seed: u64) -> Result<RawImage> {
    let electrons = expected_electrons(irradiance, sensor, t)?;
    capture_electrons(&electrons, sensor, seed)
}

/// Noise, clipping and quantization applied to mean photo-electrons.
///
/// Each row draws from its own ChaCha8 stream keyed by `(seed, row)`, so the
/// output does not depend on how rows are spread across threads.
pub fn capture_electrons(electrons: &ElectronImage, sensor: &SensorConfig, seed: u64) -> Result<RawImage> {
    sensor.validate()?;
    let t = electrons.exposure_time;
    if !(t > 0.0) {
        return Err(Error::Domain(format!("exposure must be > 0, got {t}")));
    }
    let w = electrons.width;
    let full = sensor.full_scale_dn();
    let black = sensor.black_level as f64;
    let dn_span = full as f64 - black;
    let g = sensor.conversion_gain * sensor.analog_gain;
    let read_sigma_v = sensor.read_noise * g;

    let rows: Vec<(Vec<u16>, usize)> = electrons
        .electrons
        .par_chunks(w)
        .enumerate()
        .map(|(r, line)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut saturated = 0;
            let out = line
                .iter()
                .map(|mean| {
                    let mean = mean + sensor.dark_current * t;
                    let n = if sensor.shot_noise {
                        poisson::sample(&mut rng, mean) as f64
                    } else {
                        mean
                    };
                    let at_well = n >= sensor.well_capacity;
                    let n = n.min(sensor.well_capacity);
                    let mut v = n * g;
                    if read_sigma_v > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += read_sigma_v * z;
                    }
                    let v = v.min(sensor.voltage_swing);
                    let dn = (black + v / sensor.voltage_swing * dn_span).round().clamp(0.0, full as f64) as u16;
                    if at_well || dn as u32 == full {
                        saturated += 1;
                    }
                    dn
                })
                .collect();
            (out, saturated)
        })
        .collect();

    let total = electrons.electrons.len();
    let saturated: usize = rows.iter().map(|(_, s)| s).sum();
    let dn: Vec<u16> = rows.into_iter().flat_map(|(r, _)| r).collect();
    Ok(RawImage {
        width: w,
        height: electrons.height,
        cfa: sensor.cfa,
        bit_depth: sensor.bit_depth,
        black_level: sensor.black_level,
        exposure_time: t,
        saturated_fraction: saturated as f64 / total as f64,
        dn,
    })
}
