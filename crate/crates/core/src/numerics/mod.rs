//! Tensor container and the small set of deterministic kernels the rest of
//! the crate composes.
//!
//! Values are stored as `f32`; reductions accumulate in `f64` and round once
//! at the end so results do not depend on summation order quirks of `f32`.

pub mod pft;
mod tensor;

pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Vertical border handling for ERP maps. Columns always wrap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerticalPad {
    #[default]
    Replicate,
    Zero,
}

/// Padding policy for panorama-aware convolution. The horizontal axis of an
/// equirectangular map is periodic, so only the vertical policy is a choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PanoPadding {
    pub vertical: VerticalPad,
}

impl PanoPadding {
    pub const REPLICATE: PanoPadding = PanoPadding {
        vertical: VerticalPad::Replicate,
    };
    pub const ZERO: PanoPadding = PanoPadding {
        vertical: VerticalPad::Zero,
    };
}

/// Column index with wraparound.
#[inline]
pub fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = ad[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![m, n], out)
}

/// `A · Bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_bt inner dims differ: {m}x{k} · ({n}x{k2})ᵀ"
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)) as f32);
        }
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Softmax along each row, max-subtracted.
pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| (e / z) as f32));
    }
    Tensor::new(vec![m, n], out)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| sigmoid_scalar(v as f64) as f32)
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| gelu_scalar(v as f64) as f32)
}

/// Row-wise layer normalization with per-channel scale and offset.
pub fn layer_norm(x: &Tensor, scale: &[f32], offset: &[f32], eps: f64) -> Result<Tensor> {
    let (m, d) = x.dims2()?;
    if scale.len() != d || offset.len() != d {
        return Err(Error::shape(format!(
            "layer norm over {d} channels with {} scales / {} offsets",
            scale.len(),
            offset.len()
        )));
    }
    let mut out = Vec::with_capacity(m * d);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..d {
            let z = (row[c] as f64 - mean) * inv;
            out.push((z * scale[c] as f64 + offset[c] as f64) as f32);
        }
    }
    Tensor::new(vec![m, d], out)
}

/// Per-channel 2-D correlation of a C×H×W map with an odd-sized kernel.
/// Columns wrap around; rows follow `pad.vertical`.
pub fn conv2d_pano(map: &Tensor, kernel: &Tensor, pad: PanoPadding) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let (kh, kw) = kernel.dims2()?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::param(format!(
            "kernel dims must be odd, got {kh}x{kw}"
        )));
    }
    let (rh, rw) = ((kh / 2) as isize, (kw / 2) as isize);
    let kd = kernel.data();
    let md = map.data();
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        let plane = &md[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f64;
                for i in 0..kh {
                    let yy = y as isize + i as isize - rh;
                    let row = if yy < 0 || yy >= h as isize {
                        match pad.vertical {
                            VerticalPad::Zero => continue,
                            VerticalPad::Replicate => yy.clamp(0, h as isize - 1) as usize,
                        }
                    } else {
                        yy as usize
                    };
                    for j in 0..kw {
                        let kv = kd[i * kw + j];
                        if kv == 0.0 {
                            continue;
                        }
                        let col = wrap(x as isize + j as isize - rw, w);
                        acc += kv as f64 * plane[row * w + col] as f64;
                    }
                }
                out[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Sampled isotropic Gaussian of size (2r+1)², normalized to unit sum.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!(
            "gaussian sigma must be > 0, got {sigma}"
        )));
    }
    let n = 2 * radius + 1;
    let r = radius as f64;
    let raw: Vec<f64> = (0..n * n)
        .map(|k| {
            let (y, x) = ((k / n) as f64 - r, (k % n) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = raw.iter().sum();
    Tensor::new(vec![n, n], raw.iter().map(|&v| (v / z) as f32).collect())
}

/// Radius that covers three standard deviations.
pub fn gaussian_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// 4-neighbour Laplacian stencil.
pub fn laplacian_kernel() -> Tensor {
    Tensor::new(
        vec![3, 3],
        vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    )
    .expect("static shape")
}

/// Indices of the `k` largest entries (ties go to the lower index), returned
/// in ascending index order.
pub fn topk_indices(v: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::param(format!(
            "top-k needs 1 <= k <= {}, got k={k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Lower bound applied to standard deviations so standardization is defined
/// on constant inputs.
pub const STD_FLOOR: f64 = 1e-8;

/// Mean and population standard deviation (floored at [`STD_FLOOR`]).
pub fn mean_std(v: &[f32]) -> (f64, f64) {
    assert!(!v.is_empty(), "mean_std of empty slice");
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}
