//! Spherical-aware decoding: class/token similarity readout followed by
//! affinity-based densification of sparse activations.
//!
//! Densification works per class. The `k` most activated tokens act as
//! seeds; every token receives the strongest seed confidence it is
//! connected to through the cosine affinity matrix, scaled by `alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dasm::{TextEmbeddings, VisualTokens};
use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSpace {
    /// Columns index tokens of an `H_p × W_p` grid.
    Token {
        grid: (usize, usize),
    },
    Pixel,
}

/// Per-class activation map: C×L in token space, C×H×W in pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct AffordanceMap {
    pub values: Tensor,
    pub space: MapSpace,
}

impl AffordanceMap {
    pub fn tokens(values: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (_, l) = values.dims2()?;
        if grid.0 * grid.1 != l {
            return Err(Error::shape(format!(
                "{l} map columns do not fill a {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self {
            values,
            space: MapSpace::Token { grid },
        })
    }

    pub fn pixels(values: Tensor) -> Result<Self> {
        values.dims3()?;
        Ok(Self {
            values,
            space: MapSpace::Pixel,
        })
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        match self.space {
            MapSpace::Token { grid } => Some(grid),
            MapSpace::Pixel => None,
        }
    }
}

/// Symmetric L×L cosine similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub s: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OsdhParams {
    /// Seeds per class.
    pub k: usize,
    /// Confidence temperature.
    pub temperature: f64,
    /// Residual weight of the propagated activation.
    pub alpha: f64,
    /// Drop negative propagation (anti-correlated seeds).
    pub clamp_negative: bool,
    /// Refine the class queries with one parameter-free cross-attention step
    /// over the visual tokens before the similarity readout.
    pub query_refinement: bool,
}

impl Default for OsdhParams {
    fn default() -> Self {
        Self {
            k: 10,
            temperature: 1.0,
            alpha: 0.5,
            clamp_negative: true,
            query_refinement: false,
        }
    }
}

impl OsdhParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("seed count k must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be > 0"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("alpha must be finite"));
        }
        Ok(())
    }
}

/// `A_init = F_t · F_vᵀ / √D`: raw scaled similarity, no softmax.
pub fn global_semantic_discovery(v: &VisualTokens, t: &TextEmbeddings) -> Result<AffordanceMap> {
    if v.dim() != t.dim() {
        return Err(Error::shape(format!(
            "visual dim {} differs from text dim {}",
            v.dim(),
            t.dim()
        )));
    }
    let scale = 1.0 / (v.dim() as f32).sqrt();
    let a = numerics::matmul_bt(&t.embeddings, &v.tokens)?.map(|x| x * scale);
    AffordanceMap::tokens(a, v.grid)
}

/// Class queries after one residual cross-attention step over the tokens.
pub fn refine_queries(v: &VisualTokens, t: &TextEmbeddings) -> Result<TextEmbeddings> {
    let scale = 1.0 / (v.dim() as f32).sqrt();
    let scores = numerics::matmul_bt(&t.embeddings, &v.tokens)?.map(|x| x * scale);
    let attended = numerics::matmul(&numerics::row_softmax(&scores)?, &v.tokens)?;
    TextEmbeddings::new(
        t.embeddings.zip_map(&attended, |a, b| a + b)?,
        t.class_names.clone(),
    )
}

const NORM_FLOOR: f64 = 1e-8;

/// Cosine similarity between all token pairs (norms floored at 1e-8).
pub fn spherical_affinity(v: &VisualTokens) -> AffinityMatrix {
    let (l, _) = v.tokens.dims2().expect("2-D tokens");
    let unit: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            let row = v.tokens.row(i);
            let n = row
                .iter()
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            row.iter().map(|&x| x as f64 / n).collect()
        })
        .collect();
    let mut s = vec![0f32; l * l];
    s.par_chunks_mut(l).enumerate().for_each(|(i, out)| {
        for (j, o) in out.iter_mut().enumerate() {
            *o = unit[i]
                .iter()
                .zip(&unit[j])
                .map(|(a, b)| a * b)
                .sum::<f64>() as f32;
        }
    });
    AffinityMatrix {
        s: Tensor::new(vec![l, l], s).expect("square"),
    }
}

/// Per-class `σ((A − μ) / (σ_A / T))` with population statistics.
pub fn confidence_map(a: &AffordanceMap, temperature: f64) -> Result<Tensor> {
    let (c, l) = a.values.dims2()?;
    if !(temperature > 0.0) {
        return Err(Error::param("temperature must be > 0"));
    }
    let mut out = Vec::with_capacity(c * l);
    for ch in 0..c {
        let row = a.values.row(ch);
        let (mu, sd) = numerics::mean_std(row);
        let scale = temperature / sd;
        out.extend(
            row.iter()
                .map(|&x| numerics::sigmoid_scalar((x as f64 - mu) * scale) as f32),
        );
    }
    Tensor::new(vec![c, l], out)
}

/// Top-`k` token indices of each class row (ascending index order).
pub fn select_seeds(a: &AffordanceMap, k: usize) -> Result<Vec<Vec<usize>>> {
    let (c, _) = a.values.dims2()?;
    (0..c)
        .map(|ch| numerics::topk_indices(a.values.row(ch), k))
        .collect()
}

/// `A_refined[c,i] = A_init[c,i] + α · max_{j∈seeds_c} S_ij·C_c[j]`.
pub fn densify(
    a: &AffordanceMap,
    s: &AffinityMatrix,
    conf: &Tensor,
    seeds: &[Vec<usize>],
    p: &OsdhParams,
) -> Result<AffordanceMap> {
    let (c, l) = a.values.dims2()?;
    if s.s.shape() != [l, l] || conf.shape() != [c, l] || seeds.len() != c {
        return Err(Error::shape(format!(
            "densify: map {c}x{l}, affinity {:?}, confidence {:?}, {} seed sets",
            s.s.shape(),
            conf.shape(),
            seeds.len()
        )));
    }
    let mut out = a.values.clone();
    for (ch, set) in seeds.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::param(format!("class {ch} has no seeds")));
        }
        if let Some(&bad) = set.iter().find(|&&j| j >= l) {
            return Err(Error::param(format!("seed index {bad} out of range {l}")));
        }
        let cf = conf.row(ch);
        let row = out.row_mut(ch);
        for (i, v) in row.iter_mut().enumerate() {
            let srow = s.s.row(i);
            let mut prop = set
                .iter()
                .map(|&j| srow[j] as f64 * cf[j] as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            if p.clamp_negative {
                prop = prop.max(0.0);
            }
            *v = (*v as f64 + p.alpha * prop) as f32;
        }
    }
    Ok(AffordanceMap {
        values: out,
        space: a.space,
    })
}

/// Intermediate products of one densification pass, for inspection.
#[derive(Clone, Debug)]
pub struct OsdhTrace {
    pub initial: AffordanceMap,
    pub affinity: AffinityMatrix,
    pub confidence: Tensor,
    pub seeds: Vec<Vec<usize>>,
    pub refined: AffordanceMap,
}

/// Densification from a given initial map.
pub fn densify_from_initial(
    v: &VisualTokens,
    initial: AffordanceMap,
    p: &OsdhParams,
) -> Result<OsdhTrace> {
    p.validate()?;
    let (_, l) = initial.values.dims2()?;
    if l != v.len() {
        return Err(Error::shape(format!(
            "initial map has {l} columns for {} tokens",
            v.len()
        )));
    }
    let affinity = spherical_affinity(v);
    let confidence = confidence_map(&initial, p.temperature)?;
    let seeds = select_seeds(&initial, p.k)?;
    let refined = densify(&initial, &affinity, &confidence, &seeds, p)?;
    Ok(OsdhTrace {
        initial,
        affinity,
        confidence,
        seeds,
        refined,
    })
}

/// Discovery → affinity → confidence → seeds → densify, keeping every stage.
pub fn osdh_trace(v: &VisualTokens, t: &TextEmbeddings, p: &OsdhParams) -> Result<OsdhTrace> {
    let initial = if p.query_refinement {
        global_semantic_discovery(v, &refine_queries(v, t)?)?
    } else {
        global_semantic_discovery(v, t)?
    };
    densify_from_initial(v, initial, p)
}

pub fn osdh_forward(v: &VisualTokens, t: &TextEmbeddings, p: &OsdhParams) -> Result<AffordanceMap> {
    Ok(osdh_trace(v, t, p)?.refined)
}

/// Bilinear resize of a C×h×w map to C×out_h×out_w with half-pixel
/// alignment, wrapped columns and clamped rows.
pub fn upsample_pano(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::param("output size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let ys: Vec<(usize, usize, f64)> = (0..out_h)
        .map(|y| {
            let sy = (y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
            let y0 = sy.floor();
            let clamp = |v: f64| (v as isize).clamp(0, h as isize - 1) as usize;
            (clamp(y0), clamp(y0 + 1.0), sy - y0)
        })
        .collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let sx = (x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            let x0 = sx.floor();
            (
                numerics::wrap(x0 as isize, w),
                numerics::wrap(x0 as isize + 1, w),
                sx - x0,
            )
        })
        .collect();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let src = map.row(ch);
        let dst = out.row_mut(ch);
        for (y, &(ya, yb, fy)) in ys.iter().enumerate() {
            for (x, &(xa, xb, fx)) in xs.iter().enumerate() {
                let p = |r: usize, q: usize| src[r * w + q] as f64;
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bot = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                dst[y * out_w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    Ok(out)
}

/// Rescales each class plane to `[0, 1]`; constant planes become zero.
pub fn min_max_planes(t: &mut Tensor) {
    for ch in 0..t.shape()[0] {
        let plane = t.row_mut(ch);
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi as f64 - lo as f64;
        for v in plane.iter_mut() {
            *v = if range > 0.0 {
                ((*v as f64 - lo as f64) / range) as f32
            } else {
                0.0
            };
        }
    }
}

/// Token-space map → C×out_h×out_w pixel map, min-max normalized per class.
pub fn to_pixel_map(a: &AffordanceMap, out_h: usize, out_w: usize) -> Result<AffordanceMap> {
    let grid = a
        .grid()
        .ok_or_else(|| Error::shape("to_pixel_map expects a token-space map"))?;
    let (c, l) = a.values.dims2()?;
    if grid.0 * grid.1 != l {
        return Err(Error::shape(format!(
            "{l} columns do not fill a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let spatial = a.values.clone().reshape(&[c, grid.0, grid.1])?;
    let mut up = upsample_pano(&spatial, out_h, out_w)?;
    min_max_planes(&mut up);
    AffordanceMap::pixels(up)
}
