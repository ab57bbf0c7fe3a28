//! Raw mosaic frames and their on-disk form.
//!
//! A frame is stored as a binary PGM (`P5`) whose 16-bit samples are
//! little-endian, plus a JSON sidecar next to it with the same stem.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CfaPattern;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub cfa: CfaPattern,
    pub bit_depth: u32,
    pub black_level: u32,
    /// s
    pub exposure_time: f64,
    pub saturated_fraction: f64,
    pub dn: Vec<u16>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    exposure_time_s: f64,
    cfa: CfaPattern,
    bit_depth: u32,
    black_level: u32,
    saturated_fraction: f64,
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

impl RawImage {
    pub fn full_scale(&self) -> u32 {
        (1u32 << self.bit_depth) - 1
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.dn[row * self.width + col]
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.dn.len() != self.width * self.height {
            return Err(Error::InvalidImage(format!(
                "raw size {}x{} does not match {} samples",
                self.width,
                self.height,
                self.dn.len()
            )));
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::InvalidImage(format!("bit depth {}", self.bit_depth)));
        }
        let full = self.full_scale();
        if let Some(v) = self.dn.iter().find(|v| **v as u32 > full) {
            return Err(Error::InvalidImage(format!("DN {v} exceeds {full}")));
        }
        if !(self.exposure_time > 0.0 && self.exposure_time <= 0.016 * (1.0 + 1e-12)) {
            return Err(Error::InvalidImage(format!("exposure {} s outside (0, 16 ms]", self.exposure_time)));
        }
        Ok(())
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.full_scale()).into_bytes();
        out.reserve(self.dn.len() * 2);
        for v in &self.dn {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn sidecar(&self) -> Sidecar {
        Sidecar {
            exposure_time_s: self.exposure_time,
            cfa: self.cfa,
            bit_depth: self.bit_depth,
            black_level: self.black_level,
            saturated_fraction: self.saturated_fraction,
        }
    }

    /// Writes `path` (PGM) and its `.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let mut json = serde_json::to_vec_pretty(&self.sidecar())?;
        json.push(b'\n');
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RawImage> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let meta: Sidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)
            .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let (width, height, maxval, payload) = parse_pgm_header(&bytes)?;
        if maxval != (1u32 << meta.bit_depth) - 1 {
            return Err(Error::Format(format!(
                "PGM maxval {maxval} disagrees with bit depth {}",
                meta.bit_depth
            )));
        }
        if payload.len() != width * height * 2 {
            return Err(Error::Format(format!(
                "PGM payload has {} bytes, expected {}",
                payload.len(),
                width * height * 2
            )));
        }
        let dn = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let raw = RawImage {
            width,
            height,
            cfa: meta.cfa,
            bit_depth: meta.bit_depth,
            black_level: meta.black_level,
            exposure_time: meta.exposure_time_s,
            saturated_fraction: meta.saturated_fraction,
            dn,
        };
        raw.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(raw)
    }
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, u32, &[u8])> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let rest = bytes.strip_prefix(b"P5").ok_or_else(|| bad("missing P5 magic"))?;
    let mut fields = [0u64; 3];
    let mut pos = 0;
    for f in fields.iter_mut() {
        while pos < rest.len() && rest[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < rest.len() && rest[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        *f = std::str::from_utf8(&rest[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("header value out of range"))?;
    }
    if pos >= rest.len() || !rest[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    if !(256..=65535).contains(&fields[2]) {
        return Err(bad("only 16-bit samples are supported"));
    }
    Ok((fields[0] as usize, fields[1] as usize, fields[2] as u32, &rest[pos + 1..]))
}
