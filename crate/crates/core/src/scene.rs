//! Procedural metric scenes.
//!
//! A single car, modelled as a frontal rectangle, stands on a flat road
//! under a uniform sky. The camera looks horizontally from a fixed height,
//! so the horizon falls on the principal point's row. Every patch is an
//! axis-aligned rectangle on the sensor plane, and each sample stores the
//! exact area coverage of each patch, so edges are box-prefiltered at the
//! sample pitch.
//!
//! Only a window around the car is rendered by default. The window is the
//! image the rest of the pipeline sees: exposure metering, ISP and
//! detection all run on it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::sif;
use crate::spectral::{luminance, Spd, SpectralImage, Unit, WaveGrid};

pub const STANDARD_DISTANCES_M: [f64; 6] = [25.0, 50.0, 75.0, 100.0, 150.0, 200.0];
pub const STANDARD_SCENES_PER_DISTANCE: usize = 50;
pub const DEFAULT_FOCAL_LENGTH_MM: f64 = 6.0;
pub const DEFAULT_DIE_MM: [f64; 2] = [5.64, 4.23];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Illumination {
    Day,
    Night,
    /// Day materials at an explicit mean illuminance, no headlights.
    Lux(f64),
}

impl Illumination {
    pub fn label(&self) -> String {
        match self {
            Illumination::Day => "day".into(),
            Illumination::Night => "night".into(),
            Illumination::Lux(l) => format!("lux_{l}"),
        }
    }

    pub fn is_night(&self) -> bool {
        matches!(self, Illumination::Night)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reflectance {
    Gray(f64),
    /// `low + (high - low)·logistic((λ - center)/width)`, a red body.
    Logistic {
        low: f64,
        high: f64,
        center_nm: f64,
        width_nm: f64,
    },
    /// `base + peak·exp(-½((λ - center)/σ)²)`, a blue body.
    Band {
        base: f64,
        peak: f64,
        center_nm: f64,
        sigma_nm: f64,
    },
}

impl Reflectance {
    pub fn at(&self, lambda_nm: f64) -> f64 {
        match *self {
            Reflectance::Gray(v) => v,
            Reflectance::Logistic {
                low,
                high,
                center_nm,
                width_nm,
            } => low + (high - low) / (1.0 + (-(lambda_nm - center_nm) / width_nm).exp()),
            Reflectance::Band {
                base,
                peak,
                center_nm,
                sigma_nm,
            } => {
                let z = (lambda_nm - center_nm) / sigma_nm;
                base + peak * (-0.5 * z * z).exp()
            }
        }
    }

    pub fn spd(&self, grid: WaveGrid) -> Spd {
        Spd::from_fn(grid, |l| self.at(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarVariant {
    pub width_m: f64,
    pub height_m: f64,
    pub body: Reflectance,
}

/// Synthetic car variants: eight flat grays and two chromatic bodies.
pub const CAR_VARIANTS: [CarVariant; 10] = [
    CarVariant { width_m: 1.60, height_m: 1.30, body: Reflectance::Gray(0.08) },
    CarVariant { width_m: 1.70, height_m: 1.45, body: Reflectance::Gray(0.09) },
    CarVariant { width_m: 1.80, height_m: 1.50, body: Reflectance::Gray(0.10) },
    CarVariant { width_m: 1.75, height_m: 1.40, body: Reflectance::Gray(0.40) },
    CarVariant { width_m: 1.85, height_m: 1.55, body: Reflectance::Gray(0.43) },
    CarVariant { width_m: 1.90, height_m: 1.60, body: Reflectance::Gray(0.46) },
    CarVariant { width_m: 2.00, height_m: 1.50, body: Reflectance::Gray(0.48) },
    CarVariant { width_m: 1.65, height_m: 1.35, body: Reflectance::Gray(0.50) },
    CarVariant {
        width_m: 1.80,
        height_m: 1.45,
        body: Reflectance::Logistic { low: 0.04, high: 0.60, center_nm: 595.0, width_nm: 12.0 },
    },
    CarVariant {
        width_m: 1.95,
        height_m: 1.55,
        body: Reflectance::Band { base: 0.04, peak: 0.40, center_nm: 460.0, sigma_nm: 35.0 },
    },
];

/// Scene model parameters shared by every scene of a collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct World {
    pub camera_height_m: f64,
    pub road_reflectance: f64,
    /// Sky radiance relative to a white diffuser under the same illuminant.
    pub day_sky_factor: f64,
    pub night_sky_factor: f64,
    pub night_ambient_k: f64,
    pub headlight_k: f64,
    /// cd/m²
    pub headlight_luminance: f64,
    pub headlight_size_m: f64,
    /// Height of the headlight's lower edge above the road.
    pub headlight_height_m: f64,
    /// Distance from the car's side to the headlight's outer edge.
    pub headlight_inset_m: f64,
    pub day_lux: [f64; 2],
    pub night_lux: [f64; 2],
    pub max_lateral_offset_m: f64,
    /// Window size as multiples of the car box `[width, height]`.
    pub window_scale: [f64; 2],
    /// Gap between the car's lower edge and the window's lower edge, as a
    /// fraction of the window height.
    pub window_bottom_margin: f64,
}

impl Default for World {
    fn default() -> Self {
        World {
            camera_height_m: 1.2,
            road_reflectance: 0.25,
            day_sky_factor: 0.7,
            night_sky_factor: 0.02,
            night_ambient_k: 3000.0,
            headlight_k: 3200.0,
            headlight_luminance: 2.0e4,
            headlight_size_m: 0.15,
            headlight_height_m: 0.5,
            headlight_inset_m: 0.15,
            day_lux: [10.0, 200.0],
            night_lux: [0.1, 1.0],
            max_lateral_offset_m: 1.5,
            window_scale: [2.5, 2.4],
            window_bottom_margin: 0.1,
        }
    }
}

impl World {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("camera_height_m", self.camera_height_m > 0.0),
            ("road_reflectance", (0.0..=1.0).contains(&self.road_reflectance)),
            ("day_sky_factor", self.day_sky_factor >= 0.0),
            ("night_sky_factor", self.night_sky_factor >= 0.0),
            ("night_ambient_k", self.night_ambient_k > 0.0),
            ("headlight_k", self.headlight_k > 0.0),
            ("headlight_luminance", self.headlight_luminance >= 0.0),
            ("headlight_size_m", self.headlight_size_m > 0.0),
            ("headlight_height_m", self.headlight_height_m >= 0.0),
            ("headlight_inset_m", self.headlight_inset_m >= 0.0),
            ("day_lux", 0.0 < self.day_lux[0] && self.day_lux[0] <= self.day_lux[1]),
            ("night_lux", 0.0 < self.night_lux[0] && self.night_lux[0] <= self.night_lux[1]),
            ("max_lateral_offset_m", self.max_lateral_offset_m >= 0.0),
            ("window_scale", self.window_scale[0] >= 1.0 && self.window_scale[1] >= 1.0),
            ("window_bottom_margin", (0.0..1.0).contains(&self.window_bottom_margin)),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("world parameter `{name}` out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub distance_m: f64,
    pub illumination: Illumination,
    /// Mean scene illuminance excluding headlights, lux.
    pub target_lux: f64,
    pub car_index: usize,
    pub lateral_offset_m: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn car(&self) -> Result<&'static CarVariant> {
        CAR_VARIANTS
            .get(self.car_index)
            .ok_or_else(|| Error::Config(format!("car index {} out of range", self.car_index)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_m > 0.0) || !self.distance_m.is_finite() {
            return Err(Error::Domain(format!("distance must be > 0, got {}", self.distance_m)));
        }
        if !(self.target_lux > 0.0) || !self.target_lux.is_finite() {
            return Err(Error::Domain(format!("target illuminance must be > 0, got {}", self.target_lux)));
        }
        if let Illumination::Lux(l) = self.illumination {
            if l != self.target_lux {
                return Err(Error::Config(format!(
                    "{}: explicit illuminance {l} disagrees with target {}",
                    self.scene_id, self.target_lux
                )));
            }
        }
        self.car()?;
        Ok(())
    }
}

/// Sampling of a rendered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub grid: WaveGrid,
    pub pixel_size_um: f64,
    /// Scene samples per pixel along each axis.
    pub supersample: usize,
    pub focal_length_mm: f64,
    pub die_mm: [f64; 2],
    pub full_frame: bool,
}

/// Smallest integer supersampling whose grid Nyquist frequency reaches the
/// diffraction cutoff at `lambda_min_nm`.
pub fn required_supersample(pixel_size_um: f64, f_number: f64, lambda_min_nm: f64) -> usize {
    let ratio = 2.0 * pixel_size_um * 1e-3 / (lambda_min_nm * 1e-6 * f_number);
    // guard against ratios a hair above an integer from rounding
    ((ratio * (1.0 - 1e-12)).ceil() as usize).max(1)
}

impl RenderConfig {
    pub fn for_camera(pixel_size_um: f64, f_number: f64, focal_length_mm: f64, die_mm: [f64; 2]) -> Self {
        let grid = WaveGrid::default();
        RenderConfig {
            grid,
            pixel_size_um,
            supersample: required_supersample(pixel_size_um, f_number, grid.start),
            focal_length_mm,
            die_mm,
            full_frame: false,
        }
    }

    /// Coarse unblurred raster for archiving a collection's scenes.
    pub fn preview() -> Self {
        RenderConfig {
            grid: WaveGrid::default(),
            pixel_size_um: 5.6,
            supersample: 1,
            focal_length_mm: DEFAULT_FOCAL_LENGTH_MM,
            die_mm: DEFAULT_DIE_MM,
            full_frame: false,
        }
    }

    pub fn pixel_mm(&self) -> f64 {
        self.pixel_size_um * 1e-3
    }

    pub fn sample_pitch_mm(&self) -> f64 {
        self.pixel_mm() / self.supersample as f64
    }

    pub fn resolution(&self) -> (usize, usize) {
        let p = self.pixel_mm();
        let n = |d: f64| ((d / p) * (1.0 + 1e-12)).floor() as usize;
        (n(self.die_mm[0]), n(self.die_mm[1]))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.pixel_size_um > 0.0) || self.supersample == 0 || !(self.focal_length_mm > 0.0) {
            return Err(Error::Config("render pixel size, supersampling and focal length must be > 0".into()));
        }
        let (w, h) = self.resolution();
        if w == 0 || h == 0 {
            return Err(Error::Config("pixel larger than the die".into()));
        }
        Ok(())
    }
}

/// Sensor-plane size (mm) of an object of `size_m` at `distance_m`.
pub fn project_extent(size_m: f64, distance_m: f64, focal_length_mm: f64) -> Result<f64> {
    if !(distance_m > 0.0) || distance_m * 1e3 <= focal_length_mm {
        return Err(Error::Domain(format!(
            "distance {distance_m} m must exceed the focal length {focal_length_mm} mm"
        )));
    }
    Ok(size_m * focal_length_mm / distance_m)
}

/// Car rectangle on the sensor plane, mm from the die's top-left corner.
/// The principal point is the die center.
pub fn car_box_mm(spec: &SceneSpec, world: &World, focal_length_mm: f64, die_mm: [f64; 2]) -> Result<BBox> {
    let car = spec.car()?;
    let d = spec.distance_m;
    let w = project_extent(car.width_m, d, focal_length_mm)?;
    let h = project_extent(car.height_m, d, focal_length_mm)?;
    let cx = die_mm[0] / 2.0 + project_extent(spec.lateral_offset_m, d, focal_length_mm)?;
    let top = die_mm[1] / 2.0 + project_extent(world.camera_height_m - car.height_m, d, focal_length_mm)?;
    Ok(BBox::new(cx - w / 2.0, top, w, h))
}

/// Ground-truth box; `px` is in the coordinates of the rendered image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub px: BBox,
    pub mm: BBox,
}

/// Pixel ground truth on the full pixel array: mm divided by the pixel
/// pitch and rounded outward.
pub fn ground_truth_bbox(
    spec: &SceneSpec,
    world: &World,
    focal_length_mm: f64,
    pixel_size_um: f64,
    resolution: (usize, usize),
    die_mm: [f64; 2],
) -> Result<GroundTruthBox> {
    let mm = car_box_mm(spec, world, focal_length_mm, die_mm)?;
    let px = mm.scaled(1.0 / (pixel_size_um * 1e-3)).outward();
    let (w, h) = resolution;
    if px.x < 0.0 || px.y < 0.0 || px.right() > w as f64 || px.bottom() > h as f64 || px.w <= 0.0 || px.h <= 0.0 {
        return Err(Error::FieldOfView(format!(
            "{}: car box {:?} px leaves the {w}x{h} sensor",
            spec.scene_id, px
        )));
    }
    Ok(GroundTruthBox { px, mm })
}

/// Rendered region in full-frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderWindow {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// Smallest even number ≥ `n` with no prime factor above 5; keeps the
/// optics transforms on fast sizes.
pub fn smooth_even_at_least(n: usize) -> usize {
    let mut m = n.max(2);
    loop {
        if m % 2 == 0 {
            let mut r = m;
            for p in [2, 3, 5] {
                while r % p == 0 {
                    r /= p;
                }
            }
            if r == 1 {
                return m;
            }
        }
        m += 1;
    }
}

/// Window around the car box (full-frame pixels). The origin is kept even
/// so the CFA phase of the window matches the full frame.
pub fn render_window(car_px: BBox, resolution: (usize, usize), world: &World, full_frame: bool) -> RenderWindow {
    let (fw, fh) = resolution;
    if full_frame {
        return RenderWindow { x0: 0, y0: 0, width: fw, height: fh };
    }
    let size = |v: f64, full: usize| {
        let n = smooth_even_at_least(v.ceil() as usize);
        if n > full {
            full & !1
        } else {
            n
        }
    };
    let width = size(car_px.w * world.window_scale[0], fw);
    let height = size(car_px.h * world.window_scale[1], fh);
    let cx = car_px.x + car_px.w / 2.0;
    let x0 = cx - width as f64 / 2.0;
    let y0 = car_px.bottom() + world.window_bottom_margin * height as f64 - height as f64;
    let place = |start: f64, len: usize, full: usize| -> usize {
        let s = ((start / 2.0).floor() * 2.0).max(0.0) as usize;
        s.min((full - len) & !1)
    };
    RenderWindow {
        x0: place(x0, width, fw),
        y0: place(y0, height, fh),
        width,
        height,
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub radiance: SpectralImage,
    pub window: RenderWindow,
    /// Ground truth in window pixel coordinates.
    pub gt: GroundTruthBox,
    /// Samples touched by a headlight (night scenes only).
    pub headlight_mask: Option<Vec<bool>>,
}

impl Scene {
    /// π × mean luminance over the samples not touched by headlights.
    pub fn ambient_illuminance(&self) -> Result<f64> {
        let include: Option<Vec<bool>> = self.headlight_mask.as_ref().map(|m| m.iter().map(|h| !h).collect());
        let l = crate::spectral::mean_luminance(&self.radiance, include.as_deref())?;
        Ok(std::f64::consts::PI * l)
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

struct Materials {
    sky: Spd,
    road: Spd,
    car: Spd,
    headlight: Option<Spd>,
}

fn materials(spec: &SceneSpec, world: &World, grid: WaveGrid) -> Result<Materials> {
    let car = spec.car()?;
    let night = spec.illumination.is_night();
    let illuminant = if night {
        Spd::blackbody(grid, world.night_ambient_k)
    } else {
        Spd::d65(grid)
    }
    .with_luminance(1.0)?;
    let sky_factor = if night { world.night_sky_factor } else { world.day_sky_factor };
    let headlight = if night {
        Some(Spd::blackbody(grid, world.headlight_k).with_luminance(world.headlight_luminance)?)
    } else {
        None
    };
    Ok(Materials {
        sky: illuminant.scaled(sky_factor),
        road: illuminant.scaled(world.road_reflectance),
        car: illuminant.product(&car.body.spd(grid)),
        headlight,
    })
}

/// Ground truth (window pixel coordinates) and render window of a scene,
/// without rendering it.
pub fn scene_geometry(spec: &SceneSpec, render: &RenderConfig, world: &World) -> Result<(GroundTruthBox, RenderWindow)> {
    let resolution = render.resolution();
    let frame = ground_truth_bbox(spec, world, render.focal_length_mm, render.pixel_size_um, resolution, render.die_mm)?;
    let window = render_window(frame.px, resolution, world, render.full_frame);
    let gt = GroundTruthBox {
        px: frame.px.translated(-(window.x0 as f64), -(window.y0 as f64)),
        mm: frame.mm,
    };
    Ok((gt, window))
}

/// Per-row coverage fractions of one sample row.
struct RowCov {
    sky: f64,
    car: f64,
    car_sky: f64,
    hl: f64,
}

/// Separable coverage model of a scene that renders one band at a time.
pub struct SceneRaster {
    pub spec: SceneSpec,
    pub width: usize,
    pub height: usize,
    pub grid: WaveGrid,
    pub sample_pitch_mm: f64,
    pub window: RenderWindow,
    /// Ground truth in window pixel coordinates.
    pub gt: GroundTruthBox,
    rows: Vec<RowCov>,
    fx_car: Vec<f64>,
    fx_hl: Vec<f64>,
    /// Per band radiance of [sky, road, car, headlight].
    spectra: Vec<[f64; 4]>,
    night: bool,
}

impl SceneRaster {
    /// Builds the coverage model. Ambient radiance is scaled so that the
    /// mean illuminance over samples free of headlight coverage equals
    /// `spec.target_lux`; headlights keep their absolute luminance.
    pub fn new(spec: &SceneSpec, render: &RenderConfig, world: &World) -> Result<Self> {
        spec.validate()?;
        render.validate()?;
        world.validate()?;
        let grid = render.grid;
        let (gt, window) = scene_geometry(spec, render, world)?;
        let car_mm = gt.mm;
        let f = render.focal_length_mm;
        let d = spec.distance_m;
        let horizon = render.die_mm[1] / 2.0;
        let hl_size = project_extent(world.headlight_size_m, d, f)?;
        let hl_inset = project_extent(world.headlight_inset_m, d, f)?;
        let hl_y1 = horizon + project_extent(world.camera_height_m - world.headlight_height_m, d, f)?;
        let hl_y0 = hl_y1 - hl_size;
        let hl_x = [
            (car_mm.x + hl_inset, car_mm.x + hl_inset + hl_size),
            (car_mm.right() - hl_inset - hl_size, car_mm.right() - hl_inset),
        ];

        let ss = render.supersample;
        let ps = render.sample_pitch_mm();
        let (w, h) = (window.width * ss, window.height * ss);
        let x_origin = window.x0 as f64 * render.pixel_mm();
        let y_origin = window.y0 as f64 * render.pixel_mm();

        let mats = materials(spec, world, grid)?;
        let night = mats.headlight.is_some();

        // separable coverage factors, normalized by the sample pitch
        let mut fx_car = vec![0.0; w];
        let mut fx_hl = vec![0.0; w];
        for c in 0..w {
            let a = x_origin + c as f64 * ps;
            let b = a + ps;
            fx_car[c] = overlap(a, b, car_mm.x, car_mm.right()) / ps;
            if night {
                fx_hl[c] = hl_x.iter().map(|(l, r)| overlap(a, b, *l, *r)).sum::<f64>() / ps;
            }
        }
        let rows: Vec<RowCov> = (0..h)
            .map(|r| {
                let a = y_origin + r as f64 * ps;
                let b = a + ps;
                RowCov {
                    sky: overlap(a, b, f64::NEG_INFINITY, horizon) / ps,
                    car: overlap(a, b, car_mm.y, car_mm.bottom()) / ps,
                    car_sky: overlap(a, b, car_mm.y, car_mm.bottom().min(horizon)) / ps,
                    hl: if night { overlap(a, b, hl_y0, hl_y1) / ps } else { 0.0 },
                }
            })
            .collect();
        let mut raster = SceneRaster {
            spec: spec.clone(),
            width: w,
            height: h,
            grid,
            sample_pitch_mm: ps,
            window,
            gt,
            rows,
            fx_car,
            fx_hl,
            spectra: Vec::new(),
            night,
        };

        let lum = [luminance(&mats.sky)?, luminance(&mats.road)?, luminance(&mats.car)?];
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in &raster.rows {
            for c in 0..w {
                let wt = raster.weights(row, c);
                if wt[3] == 0.0 {
                    sum += wt[0] * lum[0] + wt[1] * lum[1] + wt[2] * lum[2];
                    count += 1;
                }
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        if !(mean > 0.0) {
            return Err(Error::DegenerateScene(format!("{}: zero ambient luminance", spec.scene_id)));
        }
        let k = spec.target_lux / (std::f64::consts::PI * mean);
        raster.spectra = (0..grid.n)
            .map(|band| {
                [
                    mats.sky.values[band] * k,
                    mats.road.values[band] * k,
                    mats.car.values[band] * k,
                    mats.headlight.as_ref().map_or(0.0, |hl| hl.values[band]),
                ]
            })
            .collect();
        Ok(raster)
    }

    /// [sky, road, car, headlight] weights of sample (row, c).
    fn weights(&self, row: &RowCov, c: usize) -> [f64; 4] {
        let hl = self.fx_hl[c] * row.hl;
        [
            (row.sky - self.fx_car[c] * row.car_sky).max(0.0),
            ((1.0 - row.sky) - self.fx_car[c] * (row.car - row.car_sky)).max(0.0),
            (self.fx_car[c] * row.car - hl).max(0.0),
            hl,
        ]
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// Writes the radiance of `band` (row-major) into `out`.
    pub fn render_band(&self, band: usize, out: &mut [f64]) {
        let s = self.spectra[band];
        let w = self.width;
        for (r, row) in self.rows.iter().enumerate() {
            for (c, v) in out[r * w..(r + 1) * w].iter_mut().enumerate() {
                let wt = self.weights(row, c);
                *v = wt[0] * s[0] + wt[1] * s[1] + wt[2] * s[2] + wt[3] * s[3];
            }
        }
    }

    /// Samples touched by a headlight (night scenes only).
    pub fn headlight_mask(&self) -> Option<Vec<bool>> {
        self.night.then(|| {
            self.rows
                .iter()
                .flat_map(|row| (0..self.width).map(move |c| self.weights(row, c)[3] > 0.0))
                .collect()
        })
    }
}

/// Renders one scene: sky, road, car body and (at night) two headlights.
/// See [`SceneRaster::new`] for the radiometric scaling.
pub fn generate_scene(spec: &SceneSpec, render: &RenderConfig, world: &World) -> Result<Scene> {
    let raster = SceneRaster::new(spec, render, world)?;
    let plane = raster.plane_len();
    let mut data = vec![0.0; plane * raster.grid.n];
    data.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(band, out)| raster.render_band(band, out));
    let radiance = SpectralImage::from_data(raster.width, raster.height, raster.grid, raster.sample_pitch_mm, Unit::Radiance, data)?;
    Ok(Scene {
        spec: spec.clone(),
        radiance,
        window: raster.window,
        gt: raster.gt,
        headlight_mask: raster.headlight_mask(),
    })
}

/// Slanted-edge test chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdgeTarget {
    /// Frame side in pixels.
    pub frame_px: usize,
    /// Tilt from vertical.
    pub angle_deg: f64,
    pub bright: f64,
    pub dark: f64,
    /// Luminance of a white diffuser, cd/m².
    pub white_luminance: f64,
}

impl Default for EdgeTarget {
    fn default() -> Self {
        EdgeTarget {
            frame_px: 128,
            angle_deg: 5.0,
            bright: 0.9,
            dark: 0.05,
            white_luminance: 1.0e4,
        }
    }
}

/// ∫ clamp(u, 0, 1) du, antiderivative used for exact edge coverage.
fn ramp_integral(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u < 1.0 {
        0.5 * u * u
    } else {
        0.5 + (u - 1.0)
    }
}

/// Fraction of the unit square at `(col, row)` left of `x = x0 + slope·y`.
fn left_coverage(col: f64, row: f64, x0: f64, slope: f64) -> f64 {
    let u0 = x0 + slope * row - col;
    if slope.abs() < 1e-15 {
        return u0.clamp(0.0, 1.0);
    }
    let u1 = u0 + slope;
    ((ramp_integral(u1) - ramp_integral(u0)) / slope).clamp(0.0, 1.0)
}

/// Bright-left, dark-right edge through the frame center, tilted
/// `angle_deg` from vertical, under D65.
pub fn generate_slanted_edge(render: &RenderConfig, target: &EdgeTarget) -> Result<SpectralImage> {
    render.validate()?;
    if target.frame_px < 8 {
        return Err(Error::Config("edge frame must be at least 8 px".into()));
    }
    let ss = render.supersample;
    let n = target.frame_px * ss;
    let slope = target.angle_deg.to_radians().tan();
    let center = n as f64 / 2.0;
    let x0 = center - slope * center;
    let white = Spd::d65(render.grid).with_luminance(target.white_luminance)?;
    let left: Vec<f64> = (0..n * n)
        .map(|i| left_coverage((i % n) as f64, (i / n) as f64, x0, slope))
        .collect();
    let mut data = vec![0.0; n * n * render.grid.n];
    data.par_chunks_mut(n * n).enumerate().for_each(|(band, out)| {
        let hi = white.values[band] * target.bright;
        let lo = white.values[band] * target.dark;
        for (v, a) in out.iter_mut().zip(&left) {
            *v = lo + (hi - lo) * a;
        }
    });
    SpectralImage::from_data(n, n, render.grid, render.sample_pitch_mm(), Unit::Radiance, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub distance_m: f64,
    pub illumination: Illumination,
    pub target_lux: f64,
    pub car_index: usize,
    pub lateral_offset_m: f64,
    pub seed: u64,
    pub sif_path: String,
    pub gt_box_mm: BBox,
}

pub const PIXEL_RULE: &str =
    "px = mm / pixel_pitch_mm measured from the die's top-left corner, rounded outward; principal point at the die center";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub collection: String,
    pub seed: u64,
    pub focal_length_mm: f64,
    pub die_mm: [f64; 2],
    pub pixel_rule: String,
    pub world: World,
    pub scenes: Vec<ManifestEntry>,
}

impl SceneManifest {
    pub fn spec(&self, entry: &ManifestEntry) -> SceneSpec {
        SceneSpec {
            scene_id: entry.scene_id.clone(),
            distance_m: entry.distance_m,
            illumination: entry.illumination,
            target_lux: entry.target_lux,
            car_index: entry.car_index,
            lateral_offset_m: entry.lateral_offset_m,
            seed: entry.seed,
        }
    }

    pub fn specs(&self) -> Vec<SceneSpec> {
        self.scenes.iter().map(|e| self.spec(e)).collect()
    }

    pub fn entry(&self, scene_id: &str) -> Option<&ManifestEntry> {
        self.scenes.iter().find(|e| e.scene_id == scene_id)
    }

    /// Distinct distances in increasing order.
    pub fn distances(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.scenes.iter().map(|e| e.distance_m).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: SceneManifest = serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        m.world.validate()?;
        for s in &m.scenes {
            m.spec(s).validate()?;
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Same geometry under a different illumination; explicit-lux scenes
    /// get `Lux(level)` and that target.
    pub fn with_illumination(&self, illumination: Illumination) -> Self {
        let mut out = self.clone();
        for (i, e) in out.scenes.iter_mut().enumerate() {
            e.illumination = illumination;
            e.target_lux = draw_lux(illumination, &self.world, self.seed, i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectionOptions {
    pub name: String,
    pub seed: u64,
    pub scenes_per_distance: usize,
    pub distances_m: Vec<f64>,
    pub illumination: Illumination,
    pub world: World,
    pub focal_length_mm: f64,
    pub die_mm: [f64; 2],
}

impl CollectionOptions {
    pub fn standard(name: &str, seed: u64, illumination: Illumination) -> Self {
        CollectionOptions {
            name: name.into(),
            seed,
            scenes_per_distance: STANDARD_SCENES_PER_DISTANCE,
            distances_m: STANDARD_DISTANCES_M.to_vec(),
            illumination,
            world: World::default(),
            focal_length_mm: DEFAULT_FOCAL_LENGTH_MM,
            die_mm: DEFAULT_DIE_MM,
        }
    }
}

// Geometry and illumination draws use separate streams so that day and
// night collections with one seed share their geometry.
const GEOMETRY_STREAM: u64 = 0;
const LUX_STREAM: u64 = 1;

fn draw_lux(illumination: Illumination, world: &World, seed: u64, index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(LUX_STREAM);
    rng.set_word_pos(index as u128 * 16);
    let u: f64 = rng.gen();
    let [lo, hi] = match illumination {
        Illumination::Day => world.day_lux,
        Illumination::Night => world.night_lux,
        Illumination::Lux(l) => return l,
    };
    lo + u * (hi - lo)
}

/// Draws the collection's scene list without rendering anything.
pub fn plan_collection(opts: &CollectionOptions) -> Result<SceneManifest> {
    opts.world.validate()?;
    if opts.scenes_per_distance == 0 || opts.distances_m.is_empty() {
        return Err(Error::Config("a collection needs at least one distance and one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(GEOMETRY_STREAM);
    let mut scenes = Vec::with_capacity(opts.distances_m.len() * opts.scenes_per_distance);
    for &d in &opts.distances_m {
        for j in 0..opts.scenes_per_distance {
            let index = scenes.len();
            let car_index = rng.gen_range(0..CAR_VARIANTS.len());
            let max_off = opts.world.max_lateral_offset_m;
            let lateral_offset_m = if max_off > 0.0 { rng.gen_range(-max_off..=max_off) } else { 0.0 };
            let seed: u64 = rng.gen();
            let scene_id = format!("d{:03}_s{:03}", d.round() as u64, j);
            let spec = SceneSpec {
                scene_id: scene_id.clone(),
                distance_m: d,
                illumination: opts.illumination,
                target_lux: draw_lux(opts.illumination, &opts.world, opts.seed, index),
                car_index,
                lateral_offset_m,
                seed,
            };
            spec.validate()?;
            let gt_box_mm = car_box_mm(&spec, &opts.world, opts.focal_length_mm, opts.die_mm)?;
            if gt_box_mm.x < 0.0
                || gt_box_mm.y < 0.0
                || gt_box_mm.right() > opts.die_mm[0]
                || gt_box_mm.bottom() > opts.die_mm[1]
            {
                return Err(Error::FieldOfView(format!("{scene_id}: car leaves the field of view")));
            }
            scenes.push(ManifestEntry {
                sif_path: format!("scenes/{scene_id}.sif"),
                scene_id,
                distance_m: d,
                illumination: spec.illumination,
                target_lux: spec.target_lux,
                car_index,
                lateral_offset_m,
                seed,
                gt_box_mm,
            });
        }
    }
    Ok(SceneManifest {
        collection: opts.name.clone(),
        seed: opts.seed,
        focal_length_mm: opts.focal_length_mm,
        die_mm: opts.die_mm,
        pixel_rule: PIXEL_RULE.into(),
        world: opts.world.clone(),
        scenes,
    })
}

/// Plans the collection, renders each scene at `preview` sampling into
/// `out_dir/scenes/*.sif`, and writes `out_dir/manifest.json`.
pub fn generate_collection(opts: &CollectionOptions, out_dir: impl AsRef<Path>, preview: &RenderConfig) -> Result<SceneManifest> {
    let out_dir = out_dir.as_ref();
    let manifest = plan_collection(opts)?;
    let scene_dir = out_dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let render = RenderConfig {
        focal_length_mm: opts.focal_length_mm,
        die_mm: opts.die_mm,
        ..preview.clone()
    };
    manifest
        .scenes
        .par_iter()
        .map(|entry| {
            let scene = generate_scene(&manifest.spec(entry), &render, &manifest.world)?;
            sif::write_sif(&scene.radiance, out_dir.join(&entry.sif_path))
        })
        .collect::<Result<Vec<()>>>()?;
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Path of a manifest entry's scene file relative to the manifest location.
pub fn scene_path(manifest_dir: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest_dir.join(&entry.sif_path)
}
