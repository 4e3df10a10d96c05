//! Equirectangular geometry: latitude profiles, wraparound augmentations and
//! keypoint-to-heatmap supervision.
//!
//! Row 0 is the north pole, rows are sampled at their centres and the equator
//! sits at latitude 0. The horizontal axis is periodic everywhere in this
//! module: distances, shifts and resampling all wrap at the 360° seam.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, wrap, PanoPadding, Tensor, VerticalPad};

#[derive(Clone, Debug, PartialEq)]
pub struct LatitudeProfile {
    /// Row-centre latitude in radians, strictly decreasing with the row index.
    pub phi: Vec<f64>,
    /// `cos(phi)`, in `[0, 1]`.
    pub weight: Vec<f64>,
}

impl LatitudeProfile {
    pub fn rows(&self) -> usize {
        self.phi.len()
    }
}

pub fn latitude_profile(rows: usize) -> LatitudeProfile {
    assert!(rows >= 1, "latitude profile needs at least one row");
    let h = rows as f64;
    let phi: Vec<f64> = (0..rows)
        .map(|r| std::f64::consts::PI * (0.5 - (r as f64 + 0.5) / h))
        .collect();
    let weight = phi.iter().map(|p| p.cos().clamp(0.0, 1.0)).collect();
    LatitudeProfile { phi, weight }
}

/// Sorted, de-duplicated list of affordance class names. Map channels follow
/// this order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    names: Vec<String>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(names: Vec<String>) -> Self {
        Self::new(names)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.names
    }
}

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        Self {
            names: set.into_iter().collect(),
        }
    }

    /// One class per line, UTF-8; blank lines are ignored.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string),
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map_err(|_| Error::Vocabulary(name.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffordancePoints {
    pub affordance: String,
    /// `(u, v)` = (column, row) pixel coordinates.
    pub points: Vec<[u32; 2]>,
}

/// Keypoint clicks for one panorama, as stored in annotation JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    #[serde(rename = "image")]
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub annotations: Vec<AffordancePoints>,
}

impl KeypointAnnotation {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let ann: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            path: origin.to_string(),
            reason: e.to_string(),
        })?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain(format!(
                "{}: image size must be positive",
                self.image_id
            )));
        }
        for entry in &self.annotations {
            for &[u, v] in &entry.points {
                if u >= self.width || v >= self.height {
                    return Err(Error::Domain(format!(
                        "{}: keypoint ({u},{v}) outside {}x{}",
                        self.image_id, self.width, self.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// All keypoints of one class, across entries.
    pub fn points_for(&self, class: &str) -> Vec<[u32; 2]> {
        self.annotations
            .iter()
            .filter(|e| e.affordance == class)
            .flat_map(|e| e.points.iter().copied())
            .collect()
    }

    /// Same annotation with every keypoint moved right by `delta` columns.
    pub fn wrap_shifted(&self, delta: isize) -> Self {
        let w = self.width as usize;
        let mut out = self.clone();
        for entry in &mut out.annotations {
            for p in &mut entry.points {
                p[0] = wrap(p[0] as isize + delta, w) as u32;
            }
        }
        out
    }
}

/// Supervision blur width: 8 px at 512 rows, proportional to image height.
pub fn default_sigma_px(height: usize) -> f64 {
    8.0 * height as f64 / 512.0
}

/// Per-class heatmap (C×H×W) from keypoints. Each point contributes an
/// unnormalized Gaussian with wraparound horizontal distance; points of the
/// same class combine by pixelwise max and each non-empty class peaks at 1.
pub fn keypoints_to_heatmap(
    ann: &KeypointAnnotation,
    classes: &Vocabulary,
    sigma_px: f64,
) -> Result<Tensor> {
    if !(sigma_px > 0.0) {
        return Err(Error::param(format!("sigma must be > 0, got {sigma_px}")));
    }
    ann.validate()?;
    let (h, w) = (ann.height as usize, ann.width as usize);
    let c = classes.len();
    if c == 0 {
        return Err(Error::config("empty class vocabulary"));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    for entry in &ann.annotations {
        let ch = classes.index_of(&entry.affordance)?;
        let plane = out.row_mut(ch);
        for &[u, v] in &entry.points {
            // row and column factors separate; precompute both
            let col: Vec<f64> = (0..w)
                .map(|x| {
                    let du = (x as i64 - u as i64).unsigned_abs() as usize;
                    let d = du.min(w - du) as f64;
                    (-d * d * inv).exp()
                })
                .collect();
            for y in 0..h {
                let dv = y as f64 - v as f64;
                let gy = (-dv * dv * inv).exp();
                let row = &mut plane[y * w..(y + 1) * w];
                for (dst, gx) in row.iter_mut().zip(&col) {
                    let g = (gy * gx) as f32;
                    if g > *dst {
                        *dst = g;
                    }
                }
            }
        }
    }
    max_normalize_planes(&mut out);
    Ok(out)
}

/// Rescales each leading-axis plane so its maximum is 1; all-zero planes
/// stay zero.
pub fn max_normalize_planes(t: &mut Tensor) {
    for c in 0..t.shape()[0] {
        let plane = t.row_mut(c);
        let mx = plane.iter().copied().fold(0f32, f32::max);
        if mx > 0.0 {
            plane.iter_mut().for_each(|v| *v /= mx);
        }
    }
}

/// Separable Gaussian blur of a C×H×W map: circular along columns, `pad`
/// along rows. Equal to [`numerics::conv2d_pano`] with
/// [`numerics::gaussian_kernel`] of the same radius.
pub fn gaussian_blur_pano(
    map: &Tensor,
    sigma: f64,
    radius: usize,
    pad: PanoPadding,
) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!(
            "gaussian sigma must be > 0, got {sigma}"
        )));
    }
    let n = 2 * radius + 1;
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    let k1: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let r = radius as isize;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut tmp = vec![0f64; h * w];
    for ch in 0..c {
        let src = map.row(ch);
        if src.iter().all(|&v| v == 0.0) {
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k1.iter().enumerate() {
                    acc += kv * src[y * w + wrap(x as isize + j as isize - r, w)] as f64;
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.row_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k1.iter().enumerate() {
                    let yy = y as isize + i as isize - r;
                    let row = if yy < 0 || yy >= h as isize {
                        match pad.vertical {
                            VerticalPad::Zero => continue,
                            VerticalPad::Replicate => yy.clamp(0, h as isize - 1) as usize,
                        }
                    } else {
                        yy as usize
                    };
                    acc += kv * tmp[row * w + x];
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Gaussian blur (radius `ceil(3σ)`) followed by per-class renormalization
/// to peak 1.
pub fn blur_supervision(map: &Tensor, sigma_px: f64) -> Result<Tensor> {
    let mut out = gaussian_blur_pano(
        map,
        sigma_px,
        numerics::gaussian_radius(sigma_px),
        PanoPadding::REPLICATE,
    )?;
    max_normalize_planes(&mut out);
    Ok(out)
}

/// Moves column `u` to `(u + delta) mod W` along the last axis.
pub fn wrap_shift(map: &Tensor, delta: isize) -> Tensor {
    let w = *map.shape().last().unwrap();
    let d = wrap(delta, w);
    if d == 0 {
        return map.clone();
    }
    let mut out = map.clone();
    for (src, dst) in map.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        dst[d..].copy_from_slice(&src[..w - d]);
        dst[..d].copy_from_slice(&src[w - d..]);
    }
    out
}

/// Reverses the column order along the last axis.
pub fn flip_horizontal(map: &Tensor) -> Tensor {
    let w = *map.shape().last().unwrap();
    let mut out = map.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Ranges used when drawing augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub max_scale_delta: f64,
    pub flip: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 3.0,
            max_scale_delta: 0.05,
            flip: true,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=3.0).contains(&self.max_rotation_deg)
            || !(0.0..=0.05).contains(&self.max_scale_delta)
        {
            return Err(Error::config(format!(
                "augmentation ranges exceed ±3° / ±5%: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub wrap_shift_px: usize,
    pub flip: bool,
    pub seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            wrap_shift_px: 0,
            flip: false,
            seed: 0,
        }
    }

    /// Draws parameters for an image `width` pixels wide from `seed` alone.
    pub fn sample(seed: u64, width: usize, ranges: &AugmentRanges) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = ranges.max_rotation_deg;
        let sd = ranges.max_scale_delta;
        let rotation_deg = if rot > 0.0 {
            rng.random_range(-rot..=rot)
        } else {
            0.0
        };
        let scale = if sd > 0.0 {
            rng.random_range(1.0 - sd..=1.0 + sd)
        } else {
            1.0
        };
        let wrap_shift_px = rng.random_range(0..width.max(1));
        let flip = ranges.flip && rng.random_bool(0.5);
        Self {
            rotation_deg,
            scale,
            wrap_shift_px,
            flip,
            seed,
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if !(-3.0..=3.0).contains(&self.rotation_deg)
            || !(0.95..=1.05).contains(&self.scale)
            || self.wrap_shift_px >= width
        {
            return Err(Error::param(format!(
                "augmentation params out of range for width {width}: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bilinear sample with wrapped columns and clamped rows.
fn sample_bilinear(plane: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let (fy, fx) = (sy - y0, sx - x0);
    let clamp_row = |y: f64| (y as isize).clamp(0, h as isize - 1) as usize;
    let (ya, yb) = (clamp_row(y0), clamp_row(y0 + 1.0));
    let (xa, xb) = (wrap(x0 as isize, w), wrap(x0 as isize + 1, w));
    let p = |y: usize, x: usize| plane[y * w + x] as f64;
    let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
    let bot = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Resamples every plane of a C×H×W tensor through `src_of`, which maps an
/// output pixel `(y, x)` to a fractional source position.
fn warp(t: &Tensor, src_of: impl Fn(f64, f64) -> (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| src_of((i / w) as f64, (i % w) as f64))
        .collect();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = t.row(ch);
        let dst = out.row_mut(ch);
        for (d, &(sy, sx)) in dst.iter_mut().zip(&coords) {
            *d = sample_bilinear(src, h, w, sy, sx);
        }
    }
    Ok(out)
}

fn geometric(t: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let (_, h, w) = t.dims3()?;
    let mut out = wrap_shift(t, p.wrap_shift_px as isize);
    if p.flip {
        out = flip_horizontal(&out);
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    if p.rotation_deg != 0.0 {
        let (s, c) = p.rotation_deg.to_radians().sin_cos();
        // inverse rotation: output pixel looks up its pre-image
        out = warp(&out, |y, x| {
            let (dy, dx) = (y - cy, x - cx);
            (cy + c * dy - s * dx, cx + s * dy + c * dx)
        })?;
    }
    if p.scale != 1.0 {
        let inv = 1.0 / p.scale;
        out = warp(&out, |y, x| (cy + (y - cy) * inv, cx + (x - cx) * inv))?;
    }
    Ok(out)
}

/// Applies wrap shift, optional flip, in-plane rotation and central scaling,
/// in that order, identically to the image and to every class map.
pub fn augment(image: &Tensor, maps: &Tensor, p: &AugmentParams) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = image.dims3()?;
    let (_, mh, mw) = maps.dims3()?;
    if (h, w) != (mh, mw) {
        return Err(Error::shape(format!(
            "image is {h}x{w} but maps are {mh}x{mw}"
        )));
    }
    p.validate(w)?;
    Ok((geometric(image, p)?, geometric(maps, p)?))
}

/// `(map + eps) / Σ(map + eps)`.
pub fn normalize_to_distribution(map: &Tensor, eps: f64) -> Result<Tensor> {
    if let Some(v) = map.data().iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "distribution input must be finite and non-negative, found {v}"
        )));
    }
    let z: f64 = map.data().iter().map(|&v| v as f64 + eps).sum();
    Ok(map.map(|v| ((v as f64 + eps) / z) as f32))
}
