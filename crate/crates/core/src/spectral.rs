//! Spectral image container and radiometric/photometric conversions.
//!
//! All spectral integrals use the rectangle rule at band centers: a band at
//! wavelength `λ_k` contributes `value_k · step`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum luminous efficacy of radiation for photopic vision, lm/W.
pub const KM: f64 = 683.0;

/// Planck constant, J·s.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Speed of light, m/s.
pub const LIGHT_SPEED: f64 = 2.997_924_58e8;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// CIE 1924 photopic luminous efficiency V(λ), 380-780 nm in 10 nm steps.
/// Values are in the standard normalization where V(555 nm) = 1.
const PHOTOPIC_V: [f64; 41] = [
    0.000039, 0.000120, 0.000396, 0.001210, 0.004000, 0.011600, 0.023000, 0.038000, 0.060000,
    0.090980, 0.139020, 0.208020, 0.323000, 0.503000, 0.710000, 0.862000, 0.954000, 0.994950,
    0.995000, 0.952000, 0.870000, 0.757000, 0.631000, 0.503000, 0.381000, 0.265000, 0.175000,
    0.107000, 0.061000, 0.032000, 0.017000, 0.008210, 0.004102, 0.002091, 0.001047, 0.000520,
    0.000249, 0.000120, 0.000060, 0.000030, 0.000015,
];

/// CIE standard illuminant D65 relative SPD, 380-780 nm in 10 nm steps.
const D65: [f64; 41] = [
    49.9755, 54.6482, 82.7549, 91.4860, 93.4318, 86.6823, 104.865, 117.008, 117.812, 114.861,
    115.923, 108.811, 109.354, 107.802, 104.790, 107.689, 104.405, 104.046, 100.000, 96.3342,
    95.7880, 88.6856, 90.0062, 89.5991, 87.6987, 83.2886, 83.6992, 80.0268, 80.2146, 82.2778,
    78.2842, 69.7213, 71.6091, 74.3490, 61.6040, 69.8856, 75.0870, 63.5927, 46.4182, 66.8054,
    63.3828,
];

const TABLE_START_NM: f64 = 380.0;
const TABLE_STEP_NM: f64 = 10.0;

fn table_lookup(table: &[f64], lambda_nm: f64) -> f64 {
    let pos = (lambda_nm - TABLE_START_NM) / TABLE_STEP_NM;
    if pos < 0.0 || pos > (table.len() - 1) as f64 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    if i + 1 >= table.len() {
        return table[table.len() - 1];
    }
    let t = pos - i as f64;
    table[i] * (1.0 - t) + table[i + 1] * t
}

/// Photopic luminous efficiency at `lambda_nm`, linearly interpolated from
/// the 10 nm table; zero outside 380-780 nm.
pub fn photopic(lambda_nm: f64) -> f64 {
    table_lookup(&PHOTOPIC_V, lambda_nm)
}

/// The embedded V(λ) table as `(wavelength_nm, value)` pairs.
pub fn photopic_table() -> impl Iterator<Item = (f64, f64)> {
    PHOTOPIC_V
        .iter()
        .enumerate()
        .map(|(i, &v)| (TABLE_START_NM + TABLE_STEP_NM * i as f64, v))
}

/// Uniform wavelength sampling: band `k` is centered at `start + k·step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveGrid {
    pub start: f64,
    pub step: f64,
    pub n: usize,
}

impl Default for WaveGrid {
    /// 400-700 nm, 31 bands at 10 nm.
    fn default() -> Self {
        WaveGrid {
            start: 400.0,
            step: 10.0,
            n: 31,
        }
    }
}

impl WaveGrid {
    pub fn new(start: f64, step: f64, n: usize) -> Result<Self> {
        let grid = WaveGrid { start, step, n };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidImage("n_wave must be >= 1".into()));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidImage(format!(
                "wave_step must be > 0, got {}",
                self.step
            )));
        }
        if !self.start.is_finite() || self.start <= 0.0 {
            return Err(Error::InvalidImage(format!(
                "wave_start must be positive, got {}",
                self.start
            )));
        }
        Ok(())
    }

    pub fn wavelength(&self, k: usize) -> f64 {
        self.start + self.step * k as f64
    }

    pub fn wavelengths(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |k| self.wavelength(k))
    }

    pub fn last(&self) -> f64 {
        self.wavelength(self.n - 1)
    }

    /// Checks that band centers span `[lo, hi]` nm.
    pub fn require_coverage(&self, lo: f64, hi: f64) -> Result<()> {
        let eps = 1e-9 * self.step;
        if self.start > lo + eps || self.last() < hi - eps {
            return Err(Error::Coverage {
                start: self.start,
                end: self.last(),
                need_lo: lo,
                need_hi: hi,
            });
        }
        Ok(())
    }

    /// Per-band photopic weights `683 · V(λ_k) · Δλ`.
    pub fn luminance_weights(&self) -> Vec<f64> {
        self.wavelengths()
            .map(|l| KM * photopic(l) * self.step)
            .collect()
    }
}

/// Spectral power distribution sampled on a [`WaveGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Spd {
    pub grid: WaveGrid,
    pub values: Vec<f64>,
}

impl Spd {
    pub fn from_fn(grid: WaveGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.wavelengths().map(f).collect();
        Spd { grid, values }
    }

    pub fn constant(grid: WaveGrid, value: f64) -> Self {
        Spd::from_fn(grid, |_| value)
    }

    /// CIE D65, relative (100 at 560 nm), linearly interpolated.
    pub fn d65(grid: WaveGrid) -> Self {
        Spd::from_fn(grid, |l| table_lookup(&D65, l))
    }

    /// Planck blackbody spectral radiance at `kelvin`, W·sr⁻¹·m⁻²·nm⁻¹.
    pub fn blackbody(grid: WaveGrid, kelvin: f64) -> Self {
        Spd::from_fn(grid, |l| planck_radiance(l, kelvin))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Spd {
            grid: self.grid,
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }

    /// Element-wise product, e.g. illuminant × reflectance.
    pub fn product(&self, other: &Spd) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Spd {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// Rescales so that [`luminance`] returns `cd_m2`.
    pub fn with_luminance(&self, cd_m2: f64) -> Result<Self> {
        let l = luminance(self)?;
        if !(l > 0.0) {
            return Err(Error::DegenerateScene("SPD has zero luminance".into()));
        }
        Ok(self.scaled(cd_m2 / l))
    }
}

/// Blackbody spectral radiance (W·sr⁻¹·m⁻²·nm⁻¹) at `lambda_nm`.
pub fn planck_radiance(lambda_nm: f64, kelvin: f64) -> f64 {
    let l = lambda_nm * 1e-9;
    let c1 = 2.0 * PLANCK * LIGHT_SPEED * LIGHT_SPEED;
    let c2 = PLANCK * LIGHT_SPEED / BOLTZMANN;
    // per metre of wavelength -> per nm
    c1 / l.powi(5) / ((c2 / (l * kelvin)).exp_m1()) * 1e-9
}

/// Luminance in cd/m² of a spectral radiance SPD: `683 · Σ V(λ)·L(λ)·Δλ`.
pub fn luminance(spd: &Spd) -> Result<f64> {
    spd.grid.require_coverage(400.0, 700.0)?;
    Ok(spd
        .grid
        .luminance_weights()
        .iter()
        .zip(&spd.values)
        .map(|(w, v)| w * v)
        .sum())
}

/// Whether an image holds scene radiance or sensor-plane irradiance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// W·sr⁻¹·m⁻²·nm⁻¹
    Radiance,
    /// W·m⁻²·nm⁻¹
    Irradiance,
}

impl Unit {
    pub fn name(self) -> &'static str {
        match self {
            Unit::Radiance => "radiance",
            Unit::Irradiance => "irradiance",
        }
    }
}

/// A plane of spectral samples stored band-major, row-major.
///
/// Values are held as `f64`; the `.sif` file stores them as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    width: usize,
    height: usize,
    grid: WaveGrid,
    sample_pitch_mm: f64,
    unit: Unit,
    data: Vec<f64>,
}

impl SpectralImage {
    pub fn zeros(
        width: usize,
        height: usize,
        grid: WaveGrid,
        sample_pitch_mm: f64,
        unit: Unit,
    ) -> Result<Self> {
        let n = checked_len(width, height, grid.n)?;
        Self::from_data(width, height, grid, sample_pitch_mm, unit, vec![0.0; n])
    }

    pub fn from_data(
        width: usize,
        height: usize,
        grid: WaveGrid,
        sample_pitch_mm: f64,
        unit: Unit,
        data: Vec<f64>,
    ) -> Result<Self> {
        grid.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("image dimensions must be nonzero".into()));
        }
        if !(sample_pitch_mm > 0.0) || !sample_pitch_mm.is_finite() {
            return Err(Error::InvalidImage(format!(
                "sample pitch must be > 0, got {sample_pitch_mm}"
            )));
        }
        let n = checked_len(width, height, grid.n)?;
        if data.len() != n {
            return Err(Error::InvalidImage(format!(
                "expected {n} samples, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidImage(format!(
                "samples must be finite and >= 0, found {bad}"
            )));
        }
        Ok(SpectralImage {
            width,
            height,
            grid,
            sample_pitch_mm,
            unit,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn grid(&self) -> WaveGrid {
        self.grid
    }
    pub fn n_wave(&self) -> usize {
        self.grid.n
    }
    pub fn sample_pitch_mm(&self) -> f64 {
        self.sample_pitch_mm
    }
    pub fn unit(&self) -> Unit {
        self.unit
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn band(&self, k: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn value(&self, k: usize, row: usize, col: usize) -> f64 {
        self.data[k * self.plane_len() + row * self.width + col]
    }

    /// Mutable band access for crate stages; callers keep values finite and >= 0.
    pub(crate) fn bands_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        let n = self.plane_len();
        self.data.chunks_exact_mut(n)
    }

    pub(crate) fn set_unit(&mut self, unit: Unit) {
        self.unit = unit;
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Returns a copy with every sample multiplied by `k >= 0`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        if !(k >= 0.0) || !k.is_finite() {
            return Err(Error::Domain(format!("scale factor must be finite and >= 0, got {k}")));
        }
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= k);
        Ok(out)
    }

    pub fn band_means(&self) -> Vec<f64> {
        let n = self.plane_len() as f64;
        (0..self.grid.n)
            .map(|k| self.band(k).iter().sum::<f64>() / n)
            .collect()
    }

    /// Per-pixel luminance of a radiance image, cd/m².
    pub fn luminance_map(&self) -> Result<Vec<f64>> {
        self.require_unit(Unit::Radiance)?;
        self.grid.require_coverage(400.0, 700.0)?;
        let w = self.grid.luminance_weights();
        let mut out = vec![0.0; self.plane_len()];
        for (k, wk) in w.iter().enumerate() {
            if *wk == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.band(k)) {
                *o += wk * v;
            }
        }
        Ok(out)
    }

    pub fn require_unit(&self, unit: Unit) -> Result<()> {
        if self.unit != unit {
            return Err(Error::Unit {
                expected: unit.name(),
                found: self.unit.name(),
            });
        }
        Ok(())
    }
}

fn checked_len(width: usize, height: usize, n_wave: usize) -> Result<usize> {
    width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(n_wave))
        .ok_or_else(|| Error::InvalidImage("image size overflows".into()))
}

/// Mean luminance of the pixels selected by `include` (all pixels when `None`).
pub(crate) fn mean_luminance(scene: &SpectralImage, include: Option<&[bool]>) -> Result<f64> {
    scene.require_unit(Unit::Radiance)?;
    scene.grid.require_coverage(400.0, 700.0)?;
    let weights = scene.grid.luminance_weights();
    let count = match include {
        Some(mask) => mask.iter().filter(|m| **m).count(),
        None => scene.plane_len(),
    };
    if count == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (k, wk) in weights.iter().enumerate() {
        let band = scene.band(k);
        let s: f64 = match include {
            Some(mask) => band.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| v).sum(),
            None => band.iter().sum(),
        };
        total += wk * s;
    }
    Ok(total / count as f64)
}

/// Scene illuminance in lux, defined Lambertian-equivalently as
/// `π × (mean per-pixel luminance)`.
pub fn scene_mean_illuminance(scene: &SpectralImage) -> Result<f64> {
    Ok(std::f64::consts::PI * mean_luminance(scene, None)?)
}

/// Multiplies all radiance by one scalar so that
/// [`scene_mean_illuminance`] equals `target_lux`.
pub fn scale_to_illuminance(scene: &SpectralImage, target_lux: f64) -> Result<SpectralImage> {
    if !(target_lux >= 0.0) || !target_lux.is_finite() {
        return Err(Error::Domain(format!("target illuminance must be >= 0, got {target_lux}")));
    }
    let current = scene_mean_illuminance(scene)?;
    if !(current > 0.0) {
        return Err(Error::DegenerateScene(
            "scene has zero mean illuminance".into(),
        ));
    }
    scene.scaled(target_lux / current)
}
