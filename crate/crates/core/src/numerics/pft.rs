//! Portable Float Tensor files.
//!
//! Layout: the magic bytes `PFT1`, a little-endian `u32` rank, that many
//! little-endian `u32` dims, then the row-major payload as little-endian
//! IEEE-754 `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFT1";

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing PFT1 magic"));
    }
    let word = |i: usize| -> Option<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let ndim = word(4).unwrap() as usize;
    let mut shape = Vec::with_capacity(ndim);
    for k in 0..ndim {
        let d = word(8 + 4 * k).ok_or_else(|| bad("truncated header"))?;
        shape.push(d as usize);
    }
    let header = 8 + 4 * ndim;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dims overflow"))?;
    let expected = n
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| bad("dims overflow"))?;
    if bytes.len() < expected {
        return Err(bad("truncated payload"));
    }
    if bytes.len() > expected {
        return Err(bad("trailing bytes after payload"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&to_bytes(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    from_bytes(&bytes, &path.display().to_string())
}

/// Writes one H×W plane as binary PGM (P5, maxval 255). Values are min-max
/// normalized first; a constant plane becomes all zeros.
pub fn write_pgm(path: impl AsRef<Path>, plane: &[f32], height: usize, width: usize) -> Result<()> {
    if plane.len() != height * width {
        return Err(Error::shape(format!(
            "PGM plane has {} values, expected {height}x{width}",
            plane.len()
        )));
    }
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        let n = if range > 0.0 { (v - lo) / range } else { 0.0 };
        (255.0 * n).round().clamp(0.0, 255.0) as u8
    }));
    fs::write(path, out)?;
    Ok(())
}
