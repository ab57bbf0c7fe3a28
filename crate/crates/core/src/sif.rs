//! `.sif` spectral image files.
//!
//! Layout: the ASCII magic `SIF1\n`, one JSON header line terminated by
//! `\n`, then `width·height·n_wave` little-endian `f32` samples in
//! band-major, row-major order. Samples are rounded to `f32` on write.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{SpectralImage, Unit, WaveGrid};

pub const MAGIC: &[u8] = b"SIF1\n";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    width: usize,
    height: usize,
    wave_start: f64,
    wave_step: f64,
    n_wave: usize,
    sample_pitch_mm: f64,
    unit: Unit,
}

pub fn encode(image: &SpectralImage) -> Result<Vec<u8>> {
    let grid = image.grid();
    let header = Header {
        width: image.width(),
        height: image.height(),
        wave_start: grid.start,
        wave_step: grid.step,
        n_wave: grid.n,
        sample_pitch_mm: image.sample_pitch_mm(),
        unit: image.unit(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + image.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    for v in image.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SpectralImage> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("bad magic or version".into()))?;
    let nl = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Format("unterminated header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let payload = &rest[nl + 1..];
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(header.n_wave))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "trailing data: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(expected / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format(format!("non-finite sample at index {i}")));
        }
        data.push(v as f64);
    }
    let grid = WaveGrid {
        start: header.wave_start,
        step: header.wave_step,
        n: header.n_wave,
    };
    SpectralImage::from_data(
        header.width,
        header.height,
        grid,
        header.sample_pitch_mm,
        header.unit,
        data,
    )
    .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_sif(image: &SpectralImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sif(path: impl AsRef<Path>) -> Result<SpectralImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
