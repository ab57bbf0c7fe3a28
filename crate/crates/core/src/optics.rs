//! Diffraction-limited lens: camera-equation scaling plus per-band OTF blur.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustdct::{DctPlanner, TransformType2And3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{SpectralImage, Unit, WaveGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticsConfig {
    pub f_number: f64,
    pub focal_length_mm: f64,
    #[serde(default = "default_transmittance")]
    pub transmittance: f64,
    /// cos⁴ field falloff.
    #[serde(default)]
    pub relative_illumination: bool,
}

fn default_transmittance() -> f64 {
    1.0
}

impl OpticsConfig {
    pub fn new(f_number: f64, focal_length_mm: f64) -> Self {
        OpticsConfig {
            f_number,
            focal_length_mm,
            transmittance: 1.0,
            relative_illumination: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_number > 0.0) || !self.f_number.is_finite() {
            return Err(Error::Config(format!("f-number must be > 0, got {}", self.f_number)));
        }
        if !(self.focal_length_mm > 0.0) || !self.focal_length_mm.is_finite() {
            return Err(Error::Config(format!(
                "focal length must be > 0, got {}",
                self.focal_length_mm
            )));
        }
        if !(self.transmittance > 0.0 && self.transmittance <= 1.0) {
            return Err(Error::Config(format!(
                "transmittance must be in (0, 1], got {}",
                self.transmittance
            )));
        }
        Ok(())
    }
}

/// Incoherent cutoff frequency `1/(λN)` in cycles/mm.
pub fn cutoff_frequency(lambda_nm: f64, f_number: f64) -> f64 {
    1.0 / (lambda_nm * 1e-6 * f_number)
}

/// Diffraction-limited OTF of a circular pupil at `f` cycles/mm.
pub fn diffraction_otf(f: f64, lambda_nm: f64, f_number: f64) -> f64 {
    let fc = cutoff_frequency(lambda_nm, f_number);
    if f <= 0.0 {
        return 1.0;
    }
    if f >= fc {
        return 0.0;
    }
    let r = f / fc;
    // cos φ = r, sin φ = √(1 − r²)
    (2.0 / PI) * (r.acos() - r * (1.0 - r * r).sqrt())
}

/// Scene radiance to image-plane irradiance for a distant object: `πT/(4N²)`.
pub fn radiance_to_irradiance_scale(f_number: f64, transmittance: f64) -> f64 {
    PI * transmittance / (4.0 * f_number * f_number)
}

/// Radius used for the blur support: three Airy first-zero radii, in mm.
pub fn psf_radius_mm(lambda_nm: f64, f_number: f64) -> f64 {
    3.0 * 1.22 * lambda_nm * 1e-6 * f_number
}

/// Where the optical axis meets the image, in mm from the image's top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldGeometry {
    pub axis_x_mm: f64,
    pub axis_y_mm: f64,
}

impl FieldGeometry {
    pub fn centered(image: &SpectralImage) -> Self {
        let p = image.sample_pitch_mm();
        FieldGeometry {
            axis_x_mm: image.width() as f64 * p / 2.0,
            axis_y_mm: image.height() as f64 * p / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OpticsReport {
    /// Samples that came out negative from filtering and were set to zero.
    pub clamped: usize,
    /// Most negative filtered sample relative to its band maximum (0 when none).
    pub min_relative: f64,
}

/// Verifies that the sample grid's Nyquist frequency reaches the OTF cutoff
/// at the shortest band.
pub fn check_sampling(image: &SpectralImage, optics: &OpticsConfig) -> Result<()> {
    check_pitch(image.sample_pitch_mm(), image.grid(), optics)
}

/// [`check_sampling`] for a sample pitch and band grid.
pub fn check_pitch(sample_pitch_mm: f64, grid: WaveGrid, optics: &OpticsConfig) -> Result<()> {
    let nyquist = 1.0 / (2.0 * sample_pitch_mm);
    let fc = cutoff_frequency(grid.start, optics.f_number);
    if nyquist < fc * (1.0 - 1e-12) {
        return Err(Error::Sampling(format!(
            "grid Nyquist {nyquist:.1} cyc/mm is below the diffraction cutoff {fc:.1} cyc/mm at {} nm",
            grid.start
        )));
    }
    Ok(())
}

/// Converts scene radiance to sensor-plane irradiance.
pub fn apply_optics(scene: &SpectralImage, optics: &OpticsConfig) -> Result<(SpectralImage, OpticsReport)> {
    apply_optics_owned(scene.clone(), optics, None)
}

/// Same as [`apply_optics`], consuming the scene and filtering in place.
/// `field` locates the optical axis for cos⁴ falloff; defaults to the image center.
pub fn apply_optics_owned(
    mut scene: SpectralImage,
    optics: &OpticsConfig,
    field: Option<FieldGeometry>,
) -> Result<(SpectralImage, OpticsReport)> {
    optics.validate()?;
    scene.require_unit(Unit::Radiance)?;
    check_sampling(&scene, optics)?;

    let field = field.unwrap_or_else(|| FieldGeometry::centered(&scene));
    let lens = LensFilter::new(scene.width(), scene.height(), scene.sample_pitch_mm(), scene.grid(), optics, field);
    let stats: Vec<(usize, f64)> = scene
        .bands_mut()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .map(|(k, band)| lens.filter_band(k, band))
        .collect();

    scene.set_unit(Unit::Irradiance);
    let report = stats.iter().fold(OpticsReport::default(), |acc, (c, m)| OpticsReport {
        clamped: acc.clamped + c,
        min_relative: acc.min_relative.min(*m),
    });
    if report.clamped > 0 {
        log::debug!(
            "optics: clamped {} negative samples (worst {:.3e} of band max)",
            report.clamped,
            report.min_relative
        );
    }
    Ok((scene, report))
}

/// Lens stage for one image geometry, applied band by band: diffraction
/// blur, radiance-to-irradiance scaling, optional cos⁴ falloff and
/// clamping of ringing below zero.
pub struct LensFilter {
    filter: BandFilter,
    pitch: f64,
    grid: WaveGrid,
    f_number: f64,
    scale: f64,
    falloff: Option<Vec<f64>>,
}

impl LensFilter {
    pub fn new(w: usize, h: usize, pitch_mm: f64, grid: WaveGrid, optics: &OpticsConfig, field: FieldGeometry) -> Self {
        LensFilter {
            filter: BandFilter::new(w, h),
            pitch: pitch_mm,
            grid,
            f_number: optics.f_number,
            scale: radiance_to_irradiance_scale(optics.f_number, optics.transmittance),
            falloff: optics
                .relative_illumination
                .then(|| cos4_map(w, h, pitch_mm, optics.focal_length_mm, field)),
        }
    }

    /// Turns radiance band `k` into irradiance in place; returns the number
    /// of clamped samples and the most negative value relative to the band
    /// maximum.
    pub fn filter_band(&self, k: usize, band: &mut [f64]) -> (usize, f64) {
        let lambda = self.grid.wavelength(k);
        let n = self.f_number;
        let transfer = |fx: f64, fy: f64| diffraction_otf((fx * fx + fy * fy).sqrt(), lambda, n);
        self.filter.apply(band, self.pitch, transfer, self.scale);
        if let Some(map) = &self.falloff {
            band.iter_mut().zip(map).for_each(|(v, m)| *v *= m);
        }
        clamp_negative(band)
    }
}

fn clamp_negative(band: &mut [f64]) -> (usize, f64) {
    let max = band.iter().cloned().fold(0.0f64, f64::max);
    let mut count = 0;
    let mut worst = 0.0f64;
    for v in band.iter_mut() {
        if *v < 0.0 {
            if max > 0.0 {
                worst = worst.min(*v / max);
            }
            *v = 0.0;
            count += 1;
        } else if !v.is_finite() {
            *v = 0.0;
        }
    }
    (count, worst)
}

fn cos4_map(w: usize, h: usize, pitch: f64, focal: f64, field: FieldGeometry) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        let y = (r as f64 + 0.5) * pitch - field.axis_y_mm;
        for c in 0..w {
            let x = (c as f64 + 0.5) * pitch - field.axis_x_mm;
            let r2 = (x * x + y * y) / (focal * focal);
            // cos θ = 1/sqrt(1 + tan²θ)
            out.push(1.0 / ((1.0 + r2) * (1.0 + r2)));
        }
    }
    out
}

/// Separable DCT-II/III pair for one image size.
///
/// Filtering in the DCT domain is convolution of the half-sample symmetric
/// (mirror) extension of the band, so the edges see reflected content and
/// the band mean is preserved when the transfer function is 1 at DC.
pub(crate) struct BandFilter {
    w: usize,
    h: usize,
    row: Arc<dyn TransformType2And3<f64>>,
    col: Arc<dyn TransformType2And3<f64>>,
}

impl BandFilter {
    pub(crate) fn new(w: usize, h: usize) -> Self {
        let mut planner = DctPlanner::new();
        BandFilter {
            w,
            h,
            row: planner.plan_dct2(w),
            col: planner.plan_dct2(h),
        }
    }

    /// Filters `band` (row-major, `h×w`) by `transfer(fx, fy)` (cycles/mm)
    /// and multiplies by `gain`. `transfer` must be non-increasing in both
    /// |fx| and |fy|; once it reaches zero the remaining coefficients are
    /// dropped.
    pub(crate) fn apply(&self, band: &mut [f64], pitch_mm: f64, transfer: impl Fn(f64, f64) -> f64, gain: f64) {
        let (w, h) = (self.w, self.h);
        assert_eq!(band.len(), w * h);
        let mut scratch = vec![0.0; self.row.get_scratch_len().max(self.col.get_scratch_len())];
        for r in band.chunks_exact_mut(w) {
            self.row.process_dct2_with_scratch(r, &mut scratch);
        }
        let mut t = transpose(band, w, h);
        // t is laid out [kx][ky]
        let fx_step = 1.0 / (2.0 * w as f64 * pitch_mm);
        let fy_step = 1.0 / (2.0 * h as f64 * pitch_mm);
        let norm = gain * (2.0 / w as f64) * (2.0 / h as f64);
        for (kx, col) in t.chunks_exact_mut(h).enumerate() {
            let fx = kx as f64 * fx_step;
            if transfer(fx, 0.0) == 0.0 {
                // transfer vanishes on the whole column (radially decreasing)
                col.fill(0.0);
                continue;
            }
            self.col.process_dct2_with_scratch(col, &mut scratch);
            let mut zero_from = h;
            for (ky, v) in col.iter_mut().enumerate() {
                let m = transfer(fx, ky as f64 * fy_step);
                if m == 0.0 {
                    zero_from = ky;
                    break;
                }
                *v *= m * norm;
            }
            col[zero_from..].fill(0.0);
            self.col.process_dct3_with_scratch(col, &mut scratch);
        }
        transpose_into(&t, band, h, w);
        for r in band.chunks_exact_mut(w) {
            self.row.process_dct3_with_scratch(r, &mut scratch);
        }
    }
}

fn transpose(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut dst = vec![0.0; w * h];
    transpose_into(src, &mut dst, w, h);
    dst
}

/// `src` is `h` rows of `w`; `dst` becomes `w` rows of `h`.
fn transpose_into(src: &[f64], dst: &mut [f64], w: usize, h: usize) {
    const B: usize = 32;
    for r0 in (0..h).step_by(B) {
        for c0 in (0..w).step_by(B) {
            for r in r0..(r0 + B).min(h) {
                for c in c0..(c0 + B).min(w) {
                    dst[c * h + r] = src[r * w + c];
                }
            }
        }
    }
}

/// CSV of `(frequency_cyc_per_mm, modulation)` for plotting.
pub fn otf_csv(lambda_nm: f64, f_number: f64, points: usize) -> String {
    let fc = cutoff_frequency(lambda_nm, f_number);
    let mut out = String::from("frequency_cyc_per_mm,modulation\n");
    let n = points.max(2);
    for i in 0..n {
        let f = fc * 1.05 * i as f64 / (n - 1) as f64;
        out.push_str(&format!("{},{}\n", f, diffraction_otf(f, lambda_nm, f_number)));
    }
    out
}
