//! Distortion-aware spectral modulation of visual tokens.
//!
//! Stages, in order:
//! 1. cross-modal injection: visual tokens attend to class text embeddings;
//! 2. frequency decomposition on the token grid (Laplacian / Gaussian);
//! 3. latitude compensation: the high-frequency branch is trusted near the
//!    equator (`cos φ`), the low-frequency branch is smoothed harder towards
//!    the poles (`1 − cos φ`);
//! 4. gated residual fusion with a text-driven channel gate and a spatial
//!    gate read off the injected features;
//! 5. contextual re-aggregation with a pre-norm self-attention + FFN block.
//!
//! The HFEM/LFSM bodies (stage 3) are this crate's concrete reading of
//! modules that are only described by their behaviour.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::erp::LatitudeProfile;
use crate::error::{Error, Result};
use crate::numerics::{self, PanoPadding, Tensor};

/// Row-major L×D token matrix laid out on an `H_p × W_p` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl VisualTokens {
    pub fn new(tokens: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (l, _) = tokens.dims2()?;
        if grid.0 * grid.1 != l {
            return Err(Error::shape(format!(
                "{l} tokens do not fill a {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    fn with_tokens(&self, tokens: Tensor) -> Self {
        Self {
            tokens,
            grid: self.grid,
        }
    }

    /// D×H_p×W_p view for spatial filtering.
    pub fn to_spatial(&self) -> Tensor {
        self.tokens
            .transpose()
            .expect("2-D")
            .reshape(&[self.dim(), self.grid.0, self.grid.1])
            .expect("grid checked at construction")
    }

    pub fn from_spatial(map: &Tensor, grid: (usize, usize)) -> Result<Self> {
        let (d, h, w) = map.dims3()?;
        let flat = map.clone().reshape(&[d, h * w])?.transpose()?;
        Self::new(flat, grid)
    }

    /// Shifts the grid right by `cols` whole columns, with wraparound.
    pub fn wrap_shift_columns(&self, cols: isize) -> Self {
        let (hp, wp) = self.grid;
        let mut out = self.tokens.clone();
        for r in 0..hp {
            for c in 0..wp {
                let dst = r * wp + numerics::wrap(c as isize + cols, wp);
                out.row_mut(dst)
                    .copy_from_slice(self.tokens.row(r * wp + c));
            }
        }
        self.with_tokens(out)
    }
}

/// C×D class embeddings, rows in `class_names` order.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    pub embeddings: Tensor,
    pub class_names: Vec<String>,
}

impl TextEmbeddings {
    pub fn new(embeddings: Tensor, class_names: Vec<String>) -> Result<Self> {
        let (c, _) = embeddings.dims2()?;
        if c == 0 || c != class_names.len() {
            return Err(Error::shape(format!(
                "{c} embedding rows for {} class names",
                class_names.len()
            )));
        }
        Ok(Self {
            embeddings,
            class_names,
        })
    }

    pub fn classes(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Query/key/value/output projections of one attention block, each D×D.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

impl AttentionWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            query: Tensor::eye(d),
            key: Tensor::eye(d),
            value: Tensor::eye(d),
            output: Tensor::eye(d),
        }
    }
}

/// Pre-norm transformer block weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ReaggregationWeights {
    pub attention: AttentionWeights,
    /// D×4D
    pub ffn_in: Tensor,
    /// 4D×D
    pub ffn_out: Tensor,
    pub norm1_scale: Vec<f32>,
    pub norm1_offset: Vec<f32>,
    pub norm2_scale: Vec<f32>,
    pub norm2_offset: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DasmParams {
    pub heads: usize,
    pub inject: AttentionWeights,
    /// Add the injected attention output back onto the input tokens.
    pub inject_residual: bool,
    /// Project the concatenated heads through `inject.output`.
    pub inject_output_projection: bool,
    pub sigma_lf: f64,
    pub hfem_pointwise: Tensor,
    pub lfsm_pointwise: Tensor,
    pub gate_text: Tensor,
    pub gate_bias: Vec<f32>,
    pub lambda_h: f64,
    pub lambda_l: f64,
    pub reagg: ReaggregationWeights,
    pub seed: u64,
}

pub const DEFAULT_SIGMA_LF: f64 = 1.5;
pub const DEFAULT_LAMBDA: f64 = 0.1;
const LAYER_NORM_EPS: f64 = 1e-5;

impl DasmParams {
    /// Seeded initialization: orthogonal attention projections, gate and
    /// first FFN layer; identity pointwise transforms; zero re-aggregation
    /// output projection, second FFN layer and gate bias. At init the
    /// re-aggregation block is therefore an exact passthrough.
    pub fn init(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ortho = |rows: usize, cols: usize| orthogonal(rows, cols, &mut rng);
        let inject = AttentionWeights {
            query: ortho(dim, dim),
            key: ortho(dim, dim),
            value: ortho(dim, dim),
            output: ortho(dim, dim),
        };
        let gate_text = ortho(dim, dim);
        let attention = AttentionWeights {
            query: ortho(dim, dim),
            key: ortho(dim, dim),
            value: ortho(dim, dim),
            output: Tensor::zeros(&[dim, dim]),
        };
        let ffn_in = ortho(dim, 4 * dim);
        Ok(Self {
            heads,
            inject,
            inject_residual: true,
            inject_output_projection: true,
            sigma_lf: DEFAULT_SIGMA_LF,
            hfem_pointwise: Tensor::eye(dim),
            lfsm_pointwise: Tensor::eye(dim),
            gate_text,
            gate_bias: vec![0.0; dim],
            lambda_h: DEFAULT_LAMBDA,
            lambda_l: DEFAULT_LAMBDA,
            reagg: ReaggregationWeights {
                attention,
                ffn_in,
                ffn_out: Tensor::zeros(&[4 * dim, dim]),
                norm1_scale: vec![1.0; dim],
                norm1_offset: vec![0.0; dim],
                norm2_scale: vec![1.0; dim],
                norm2_offset: vec![0.0; dim],
            },
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.hfem_pointwise.shape()[0]
    }

    /// Checks every weight shape against `dim()` and the head count.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {d} is not divisible by {} heads",
                self.heads
            )));
        }
        if !(self.sigma_lf > 0.0) {
            return Err(Error::config("sigma_lf must be positive"));
        }
        let square = [d, d];
        let mut named: Vec<(String, &Tensor, [usize; 2])> = vec![
            ("hfem_pointwise".into(), &self.hfem_pointwise, square),
            ("lfsm_pointwise".into(), &self.lfsm_pointwise, square),
            ("gate_text".into(), &self.gate_text, square),
            ("reagg.ffn_in".into(), &self.reagg.ffn_in, [d, 4 * d]),
            ("reagg.ffn_out".into(), &self.reagg.ffn_out, [4 * d, d]),
        ];
        for (prefix, a) in [("inject", &self.inject), ("reagg", &self.reagg.attention)] {
            for (n, t) in [
                ("q", &a.query),
                ("k", &a.key),
                ("v", &a.value),
                ("o", &a.output),
            ] {
                named.push((format!("{prefix}.{n}"), t, square));
            }
        }
        for (name, t, want) in named {
            if t.shape() != want {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        let vecs = [
            &self.gate_bias,
            &self.reagg.norm1_scale,
            &self.reagg.norm1_offset,
            &self.reagg.norm2_scale,
            &self.reagg.norm2_offset,
        ];
        if vecs.iter().any(|v| v.len() != d) {
            return Err(Error::config(
                "gate bias / layer-norm vectors must have length D",
            ));
        }
        Ok(())
    }
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is the
/// shorter side), from Gram–Schmidt on a Gaussian draw.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    // `short` orthonormal vectors of length `tall`
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..tall).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    if rows >= cols {
        // columns are the basis vectors
        Tensor::from_fn(&[rows, cols], |i| basis[i % cols][i / cols] as f32)
    } else {
        Tensor::from_fn(&[rows, cols], |i| basis[i / cols][i % cols] as f32)
    }
}

/// Scaled dot-product multi-head attention of `queries` (M×D) over
/// `context` (N×D). Returns the concatenated head outputs, projected by
/// `w.output` when `project` is set.
pub fn multi_head_attention(
    queries: &Tensor,
    context: &Tensor,
    w: &AttentionWeights,
    heads: usize,
    project: bool,
) -> Result<Tensor> {
    let (q, k, v, dh) = project_qkv(queries, context, w, heads)?;
    let (m, d) = q.dims2()?;
    let n = k.shape()[0];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0f32; m * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, orow)| {
        let qrow = q.row(i);
        let mut probs = vec![0f64; n];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            head_probs(&qrow[span.clone()], &k, span.clone(), scale, &mut probs);
            for c in span {
                let mut acc = 0f64;
                for (j, &p) in probs.iter().enumerate() {
                    acc += p * v.at2(j, c) as f64;
                }
                orow[c] = acc as f32;
            }
        }
    });
    let concat = Tensor::new(vec![m, d], out)?;
    if project {
        numerics::matmul(&concat, &w.output)
    } else {
        Ok(concat)
    }
}

/// Per-head attention probability matrices (heads × M×N).
pub fn attention_probabilities(
    queries: &Tensor,
    context: &Tensor,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Vec<Tensor>> {
    let (q, k, _, dh) = project_qkv(queries, context, w, heads)?;
    let m = q.shape()[0];
    let n = k.shape()[0];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(heads);
    let mut probs = vec![0f64; n];
    for h in 0..heads {
        let span = h * dh..(h + 1) * dh;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            head_probs(&q.row(i)[span.clone()], &k, span.clone(), scale, &mut probs);
            data.extend(probs.iter().map(|&p| p as f32));
        }
        out.push(Tensor::new(vec![m, n], data)?);
    }
    Ok(out)
}

fn project_qkv(
    queries: &Tensor,
    context: &Tensor,
    w: &AttentionWeights,
    heads: usize,
) -> Result<(Tensor, Tensor, Tensor, usize)> {
    let (_, d) = queries.dims2()?;
    let (_, dc) = context.dims2()?;
    if d != dc {
        return Err(Error::shape(format!(
            "query dim {d} differs from context dim {dc}"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "dim {d} is not divisible by {heads} heads"
        )));
    }
    let q = numerics::matmul(queries, &w.query)?;
    let k = numerics::matmul(context, &w.key)?;
    let v = numerics::matmul(context, &w.value)?;
    Ok((q, k, v, d / heads))
}

/// Softmax over keys for one query/head, written into `probs`.
fn head_probs(q: &[f32], k: &Tensor, span: std::ops::Range<usize>, scale: f64, probs: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for (j, p) in probs.iter_mut().enumerate() {
        let s = numerics::dot(q, &k.row(j)[span.clone()]) * scale;
        *p = s;
        mx = mx.max(s);
    }
    let mut z = 0.0;
    for p in probs.iter_mut() {
        *p = (*p - mx).exp();
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
}

/// Visual queries attend to text keys/values; the result is added to the
/// input tokens when `inject_residual` is set.
pub fn cross_modal_inject(
    v: &VisualTokens,
    t: &TextEmbeddings,
    p: &DasmParams,
) -> Result<VisualTokens> {
    if v.dim() != t.dim() {
        return Err(Error::shape(format!(
            "visual dim {} differs from text dim {}",
            v.dim(),
            t.dim()
        )));
    }
    let att = multi_head_attention(
        &v.tokens,
        &t.embeddings,
        &p.inject,
        p.heads,
        p.inject_output_projection,
    )?;
    let out = if p.inject_residual {
        v.tokens.zip_map(&att, |a, b| a + b)?
    } else {
        att
    };
    Ok(v.with_tokens(out))
}

/// High-frequency (Laplacian) and low-frequency (Gaussian, radius
/// `ceil(3σ)`) components of the token field on its grid.
pub fn frequency_decompose(
    v: &VisualTokens,
    p: &DasmParams,
) -> Result<(VisualTokens, VisualTokens)> {
    let spatial = v.to_spatial();
    let high = numerics::conv2d_pano(
        &spatial,
        &numerics::laplacian_kernel(),
        PanoPadding::REPLICATE,
    )?;
    let kernel = numerics::gaussian_kernel(p.sigma_lf, numerics::gaussian_radius(p.sigma_lf))?;
    let low = numerics::conv2d_pano(&spatial, &kernel, PanoPadding::REPLICATE)?;
    Ok((
        VisualTokens::from_spatial(&high, v.grid)?,
        VisualTokens::from_spatial(&low, v.grid)?,
    ))
}

fn check_rows(v: &VisualTokens, lat: &LatitudeProfile) -> Result<()> {
    if lat.rows() != v.grid.0 {
        return Err(Error::shape(format!(
            "latitude profile has {} rows, token grid has {}",
            lat.rows(),
            v.grid.0
        )));
    }
    Ok(())
}

/// Scales every token of grid row `r` by `gain[r]`.
fn scale_rows(t: &mut Tensor, grid: (usize, usize), gain: impl Fn(usize) -> f64) {
    let wp = grid.1;
    for l in 0..t.shape()[0] {
        let g = gain(l / wp);
        t.row_mut(l)
            .iter_mut()
            .for_each(|x| *x = (*x as f64 * g) as f32);
    }
}

/// High-frequency enhancement: `GELU(F_h · P_h)` attenuated per row by
/// `cos φ`.
pub fn hfem(f_h: &VisualTokens, lat: &LatitudeProfile, p: &DasmParams) -> Result<VisualTokens> {
    check_rows(f_h, lat)?;
    let mut out = numerics::gelu(&numerics::matmul(&f_h.tokens, &p.hfem_pointwise)?);
    scale_rows(&mut out, f_h.grid, |r| lat.weight[r]);
    Ok(f_h.with_tokens(out))
}

/// Low-frequency stabilization: blend towards an extra 3×3 Gaussian pass
/// with weight `1 − cos φ`, then `GELU(· · P_l)`.
pub fn lfsm(f_l: &VisualTokens, lat: &LatitudeProfile, p: &DasmParams) -> Result<VisualTokens> {
    check_rows(f_l, lat)?;
    let smooth = numerics::conv2d_pano(
        &f_l.to_spatial(),
        &numerics::gaussian_kernel(1.0, 1)?,
        PanoPadding::REPLICATE,
    )?;
    let smooth = VisualTokens::from_spatial(&smooth, f_l.grid)?.tokens;
    let wp = f_l.grid.1;
    let d = f_l.dim();
    let blended = Tensor::from_fn(f_l.tokens.shape(), |i| {
        let wl = 1.0 - lat.weight[(i / d) / wp];
        ((1.0 - wl) * f_l.tokens.data()[i] as f64 + wl * smooth.data()[i] as f64) as f32
    });
    let out = numerics::gelu(&numerics::matmul(&blended, &p.lfsm_pointwise)?);
    Ok(f_l.with_tokens(out))
}

/// Text-driven channel gate `σ(mean_c(F_t) · G + b)`, length D.
pub fn channel_gate(t: &TextEmbeddings, p: &DasmParams) -> Result<Vec<f32>> {
    let (c, d) = t.embeddings.dims2()?;
    let mean = Tensor::from_fn(&[1, d], |j| {
        (0..c).map(|i| t.embeddings.at2(i, j) as f64).sum::<f64>() as f32 / c as f32
    });
    let logits = numerics::matmul(&mean, &p.gate_text)?;
    if p.gate_bias.len() != d {
        return Err(Error::shape("gate bias length differs from D"));
    }
    Ok(logits
        .data()
        .iter()
        .zip(&p.gate_bias)
        .map(|(&x, &b)| numerics::sigmoid_scalar(x as f64 + b as f64) as f32)
        .collect())
}

/// Spatial gate `σ(channel mean)` per token, length L.
pub fn spatial_gate(f: &VisualTokens) -> Vec<f32> {
    let d = f.dim() as f64;
    (0..f.len())
        .map(|l| {
            let m = f.tokens.row(l).iter().map(|&x| x as f64).sum::<f64>() / d;
            numerics::sigmoid_scalar(m) as f32
        })
        .collect()
}

/// `F' + λ_h·(g_ch⊙g_sp⊙F_h') + λ_l·(g_ch⊙g_sp⊙F_l')` for given gates.
pub fn gated_residual(
    f_prime: &Tensor,
    f_h: &Tensor,
    f_l: &Tensor,
    g_ch: &[f32],
    g_sp: &[f32],
    lambda_h: f64,
    lambda_l: f64,
) -> Result<Tensor> {
    let (l, d) = f_prime.dims2()?;
    if f_h.shape() != f_prime.shape() || f_l.shape() != f_prime.shape() {
        return Err(Error::shape("fusion branches must share the F' shape"));
    }
    if g_ch.len() != d || g_sp.len() != l {
        return Err(Error::shape(format!(
            "gates of length {}/{} for {l}x{d} tokens",
            g_ch.len(),
            g_sp.len()
        )));
    }
    Ok(Tensor::from_fn(&[l, d], |i| {
        let g = g_ch[i % d] as f64 * g_sp[i / d] as f64;
        (f_prime.data()[i] as f64
            + lambda_h * g * f_h.data()[i] as f64
            + lambda_l * g * f_l.data()[i] as f64) as f32
    }))
}

pub fn hybrid_gated_fuse(
    f_prime: &VisualTokens,
    f_h: &VisualTokens,
    f_l: &VisualTokens,
    t: &TextEmbeddings,
    p: &DasmParams,
) -> Result<VisualTokens> {
    let g_ch = channel_gate(t, p)?;
    let g_sp = spatial_gate(f_prime);
    let fused = gated_residual(
        &f_prime.tokens,
        &f_h.tokens,
        &f_l.tokens,
        &g_ch,
        &g_sp,
        p.lambda_h,
        p.lambda_l,
    )?;
    Ok(f_prime.with_tokens(fused))
}

/// Pre-norm block: `X = F + MHSA(LN(F))`, `out = X + GELU(LN(X)·W₁)·W₂`.
pub fn contextual_reaggregate(f: &VisualTokens, p: &DasmParams) -> Result<VisualTokens> {
    let r = &p.reagg;
    let n1 = numerics::layer_norm(&f.tokens, &r.norm1_scale, &r.norm1_offset, LAYER_NORM_EPS)?;
    let att = multi_head_attention(&n1, &n1, &r.attention, p.heads, true)?;
    let x = f.tokens.zip_map(&att, |a, b| a + b)?;
    let n2 = numerics::layer_norm(&x, &r.norm2_scale, &r.norm2_offset, LAYER_NORM_EPS)?;
    let hidden = numerics::gelu(&numerics::matmul(&n2, &r.ffn_in)?);
    let ffn = numerics::matmul(&hidden, &r.ffn_out)?;
    Ok(f.with_tokens(x.zip_map(&ffn, |a, b| a + b)?))
}

/// Full modulator: inject → decompose → HFEM/LFSM → fuse → re-aggregate.
pub fn dasm_forward(
    v: &VisualTokens,
    t: &TextEmbeddings,
    lat: &LatitudeProfile,
    p: &DasmParams,
) -> Result<VisualTokens> {
    if v.dim() != p.dim() {
        return Err(Error::shape(format!(
            "token dim {} differs from parameter dim {}",
            v.dim(),
            p.dim()
        )));
    }
    let injected = cross_modal_inject(v, t, p)?;
    let (high, low) = frequency_decompose(&injected, p)?;
    let high = hfem(&high, lat, p)?;
    let low = lfsm(&low, lat, p)?;
    let fused = hybrid_gated_fuse(&injected, &high, &low, t, p)?;
    contextual_reaggregate(&fused, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erp::latitude_profile;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
    }

    fn tokens(grid: (usize, usize), d: usize, seed: u64) -> VisualTokens {
        VisualTokens::new(rand_tensor(&[grid.0 * grid.1, d], seed), grid).unwrap()
    }

    fn text(c: usize, d: usize, seed: u64) -> TextEmbeddings {
        TextEmbeddings::new(
            rand_tensor(&[c, d], seed),
            (0..c).map(|i| format!("c{i}")).collect(),
        )
        .unwrap()
    }

    fn identity_params(d: usize, heads: usize) -> DasmParams {
        let mut p = DasmParams::init(d, heads, 0).unwrap();
        p.inject = AttentionWeights::identity(d);
        p
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal(6, 6, &mut rng);
        let g = numerics::matmul(&q.transpose().unwrap(), &q).unwrap();
        assert!(g.max_abs_diff(&Tensor::eye(6)) < 1e-5);
        let wide = orthogonal(3, 12, &mut rng);
        let g = numerics::matmul_bt(&wide, &wide).unwrap();
        assert!(g.max_abs_diff(&Tensor::eye(3)) < 1e-5);
    }

    #[test]
    fn init_rejects_bad_heads() {
        assert!(matches!(DasmParams::init(10, 4, 0), Err(Error::Config(_))));
        assert!(DasmParams::init(8, 4, 0).unwrap().validate().is_ok());
    }

    #[test]
    fn inject_worked_example() {
        let v = VisualTokens::new(Tensor::from_rows(&[[1.0, 0.0]]).unwrap(), (1, 1)).unwrap();
        let t = TextEmbeddings::new(Tensor::eye(2), vec!["a".into(), "b".into()]).unwrap();
        let mut p = identity_params(2, 1);
        p.inject_residual = false;
        let out = cross_modal_inject(&v, &t, &p).unwrap();
        assert_abs_diff_eq!(out.tokens.data()[0], 0.6698, epsilon = 1e-4);
        assert_abs_diff_eq!(out.tokens.data()[1], 0.3302, epsilon = 1e-4);
        p.inject_residual = true;
        let out = cross_modal_inject(&v, &t, &p).unwrap();
        assert_abs_diff_eq!(out.tokens.data()[0], 1.6698, epsilon = 1e-4);
    }

    #[test]
    fn inject_single_class_returns_its_value_row() {
        let v = tokens((2, 3), 4, 1);
        let t = text(1, 4, 2);
        let mut p = identity_params(4, 2);
        p.inject_residual = false;
        let out = cross_modal_inject(&v, &t, &p).unwrap();
        for l in 0..6 {
            for (a, b) in out.tokens.row(l).iter().zip(t.embeddings.row(0)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn inject_zero_output_projection_is_identity() {
        let v = tokens((2, 3), 4, 1);
        let t = text(3, 4, 2);
        let mut p = DasmParams::init(4, 2, 9).unwrap();
        p.inject.output = Tensor::zeros(&[4, 4]);
        assert_eq!(cross_modal_inject(&v, &t, &p).unwrap(), v);
    }

    #[test]
    fn decompose_constant_field() {
        let v = VisualTokens::new(Tensor::filled(&[12, 3], 2.5), (3, 4)).unwrap();
        let p = DasmParams::init(3, 1, 0).unwrap();
        let (h, l) = frequency_decompose(&v, &p).unwrap();
        assert!(h.tokens.data().iter().all(|x| x.abs() < 1e-6));
        assert!(l.tokens.max_abs_diff(&v.tokens) < 1e-6);
    }

    #[test]
    fn decompose_ramp_only_responds_at_seam() {
        // single channel, ramp along columns, constant along rows
        let (hp, wp) = (3, 6);
        let v = VisualTokens::new(
            Tensor::from_fn(&[hp * wp, 1], |l| (l % wp) as f32),
            (hp, wp),
        )
        .unwrap();
        let p = DasmParams::init(1, 1, 0).unwrap();
        let (h, _) = frequency_decompose(&v, &p).unwrap();
        for l in 0..hp * wp {
            let col = l % wp;
            let val = h.tokens.data()[l];
            if col == 0 || col == wp - 1 {
                assert_abs_diff_eq!(val.abs(), wp as f32, epsilon = 1e-5);
            } else {
                assert_abs_diff_eq!(val, 0.0, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn decompose_impulse_gives_kernel_footprint() {
        let (hp, wp) = (13, 15);
        let mut t = Tensor::zeros(&[hp * wp, 1]);
        t.data_mut()[6 * wp + 7] = 1.0;
        let v = VisualTokens::new(t, (hp, wp)).unwrap();
        let p = DasmParams::init(1, 1, 0).unwrap();
        let (_, l) = frequency_decompose(&v, &p).unwrap();
        let r = numerics::gaussian_radius(p.sigma_lf);
        let k = numerics::gaussian_kernel(p.sigma_lf, r).unwrap();
        for dy in 0..2 * r + 1 {
            for dx in 0..2 * r + 1 {
                let y = 6 + dy - r;
                let x = 7 + dx - r;
                assert_abs_diff_eq!(l.tokens.data()[y * wp + x], k.at2(dy, dx), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn hfem_examples() {
        let lat = latitude_profile(3);
        let p = DasmParams::init(2, 1, 0).unwrap();
        let f = VisualTokens::new(Tensor::filled(&[6, 2], 0.8), (3, 2)).unwrap();
        let out = hfem(&f, &lat, &p).unwrap();
        // middle row is the equator: plain GELU
        let g = numerics::gelu_scalar(0.8) as f32;
        assert_abs_diff_eq!(out.tokens.at2(2, 0), g, epsilon = 1e-6);
        // cos φ = 0.5 on the outer rows of a 3-row grid
        assert_abs_diff_eq!(lat.weight[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            out.tokens.at2(0, 0),
            0.5 * out.tokens.at2(2, 0),
            epsilon = 1e-6
        );
        let zero = VisualTokens::new(Tensor::zeros(&[6, 2]), (3, 2)).unwrap();
        assert!(hfem(&zero, &lat, &p)
            .unwrap()
            .tokens
            .data()
            .iter()
            .all(|&x| x == 0.0));
        assert!(matches!(
            hfem(&f, &latitude_profile(4), &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lfsm_equator_and_constant() {
        let lat = latitude_profile(5);
        let p = DasmParams::init(2, 1, 0).unwrap();
        let f = tokens((5, 4), 2, 7);
        let out = lfsm(&f, &lat, &p).unwrap();
        for l in 8..12 {
            for c in 0..2 {
                let want = numerics::gelu_scalar(f.tokens.at2(l, c) as f64) as f32;
                assert_abs_diff_eq!(out.tokens.at2(l, c), want, epsilon = 1e-6);
            }
        }
        let k = VisualTokens::new(Tensor::filled(&[20, 2], -0.3), (5, 4)).unwrap();
        let out = lfsm(&k, &lat, &p).unwrap();
        let want = numerics::gelu_scalar(-0.3) as f32;
        assert!(out.tokens.data().iter().all(|&x| (x - want).abs() < 1e-6));
    }

    /// Mass-weighted squared wraparound distance from the impulse column.
    fn spread(t: &Tensor, wp: usize, row: usize, col: usize) -> f64 {
        let mut m = 0.0;
        let mut s = 0.0;
        for l in 0..t.shape()[0] {
            let (r, c) = (l / wp, l % wp);
            let du = (c as isize - col as isize).unsigned_abs();
            let du = du.min(wp - du) as f64;
            let dv = r as f64 - row as f64;
            let a = t.data()[l].max(0.0) as f64;
            m += a;
            s += a * (du * du + dv * dv);
        }
        s / m
    }

    #[test]
    fn lfsm_spreads_poles_more_than_equator() {
        let (hp, wp) = (9, 12);
        let lat = latitude_profile(hp);
        let p = DasmParams::init(1, 1, 0).unwrap();
        let impulse = |row: usize| {
            let mut t = Tensor::zeros(&[hp * wp, 1]);
            t.data_mut()[row * wp + 5] = 1.0;
            VisualTokens::new(t, (hp, wp)).unwrap()
        };
        let pole = lfsm(&impulse(0), &lat, &p).unwrap();
        let eq = lfsm(&impulse(4), &lat, &p).unwrap();
        assert!(spread(&pole.tokens, wp, 0, 5) > spread(&eq.tokens, wp, 4, 5));
    }

    #[test]
    fn fuse_examples() {
        let one = Tensor::filled(&[1, 1], 1.0);
        let two = Tensor::filled(&[1, 1], 2.0);
        let zero = Tensor::zeros(&[1, 1]);
        let out = gated_residual(&one, &two, &zero, &[0.5], &[0.5], 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(out.data()[0], 1.05, epsilon = 1e-6);

        let f = tokens((2, 3), 4, 1);
        let h = tokens((2, 3), 4, 2);
        let l = tokens((2, 3), 4, 3);
        let t = text(2, 4, 4);
        let mut p = DasmParams::init(4, 2, 0).unwrap();
        p.lambda_h = 0.0;
        p.lambda_l = 0.0;
        assert_eq!(hybrid_gated_fuse(&f, &h, &l, &t, &p).unwrap(), f);

        p.lambda_h = 0.7;
        p.lambda_l = -0.4;
        p.gate_bias = vec![-1e4; 4];
        let closed = hybrid_gated_fuse(&f, &h, &l, &t, &p).unwrap();
        assert!(closed.tokens.max_abs_diff(&f.tokens) < 1e-6);
    }

    #[test]
    fn reaggregate_passthrough_at_init() {
        let f = tokens((3, 4), 8, 11);
        let p = DasmParams::init(8, 2, 5).unwrap();
        assert_eq!(contextual_reaggregate(&f, &p).unwrap(), f);
    }

    #[test]
    fn single_token_self_attention_weight_is_one() {
        let f = tokens((1, 1), 4, 1);
        let p = DasmParams::init(4, 2, 5).unwrap();
        let probs = attention_probabilities(&f.tokens, &f.tokens, &p.reagg.attention, 2).unwrap();
        for pr in probs {
            assert_eq!(pr.data(), &[1.0]);
        }
    }

    fn perturbed_params(d: usize, heads: usize, seed: u64) -> DasmParams {
        let mut p = DasmParams::init(d, heads, seed).unwrap();
        p.reagg.attention.output = rand_tensor(&[d, d], seed + 1).map(|x| 0.3 * x);
        p.reagg.ffn_out = rand_tensor(&[4 * d, d], seed + 2).map(|x| 0.1 * x);
        p.hfem_pointwise = rand_tensor(&[d, d], seed + 3).map(|x| 0.5 * x);
        p
    }

    #[test]
    fn reaggregate_is_permutation_equivariant() {
        let f = tokens((3, 5), 8, 21);
        let p = perturbed_params(8, 4, 3);
        let perm: Vec<usize> = (0..15).map(|i| (i * 7) % 15).collect();
        let permuted = VisualTokens::new(
            Tensor::from_fn(&[15, 8], |i| f.tokens.at2(perm[i / 8], i % 8)),
            (3, 5),
        )
        .unwrap();
        let a = contextual_reaggregate(&f, &p).unwrap();
        let b = contextual_reaggregate(&permuted, &p).unwrap();
        for i in 0..15 {
            for c in 0..8 {
                assert_abs_diff_eq!(b.tokens.at2(i, c), a.tokens.at2(perm[i], c), epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn forward_reduces_to_injection_when_branches_off() {
        let v = tokens((4, 6), 8, 1);
        let t = text(3, 8, 2);
        let lat = latitude_profile(4);
        let mut p = DasmParams::init(8, 2, 7).unwrap();
        p.lambda_h = 0.0;
        p.lambda_l = 0.0;
        let out = dasm_forward(&v, &t, &lat, &p).unwrap();

        // standalone injection oracle: per-head softmax(QKᵀ/√d_h)V, concat, W_O, residual
        let q = numerics::matmul(&v.tokens, &p.inject.query).unwrap();
        let k = numerics::matmul(&t.embeddings, &p.inject.key).unwrap();
        let val = numerics::matmul(&t.embeddings, &p.inject.value).unwrap();
        let dh = 4;
        let mut concat = Tensor::zeros(&[24, 8]);
        for h in 0..2 {
            let cols = h * dh..(h + 1) * dh;
            let qh = Tensor::from_fn(&[24, dh], |i| q.at2(i / dh, cols.start + i % dh));
            let kh = Tensor::from_fn(&[3, dh], |i| k.at2(i / dh, cols.start + i % dh));
            let vh = Tensor::from_fn(&[3, dh], |i| val.at2(i / dh, cols.start + i % dh));
            let s = numerics::matmul_bt(&qh, &kh)
                .unwrap()
                .map(|x| x / (dh as f32).sqrt());
            let o = numerics::matmul(&numerics::row_softmax(&s).unwrap(), &vh).unwrap();
            for i in 0..24 {
                for c in 0..dh {
                    concat.data_mut()[i * 8 + cols.start + c] = o.at2(i, c);
                }
            }
        }
        let want = numerics::matmul(&concat, &p.inject.output)
            .unwrap()
            .zip_map(&v.tokens, |a, b| a + b)
            .unwrap();
        assert!(out.tokens.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let v = tokens((4, 6), 8, 1);
        let t = text(3, 8, 2);
        let lat = latitude_profile(4);
        let p = perturbed_params(8, 2, 1);
        let a = dasm_forward(&v, &t, &lat, &p).unwrap();
        let b = dasm_forward(&v, &t, &lat, &p).unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
    }

    #[test]
    fn forward_commutes_with_column_shift() {
        let v = tokens((4, 6), 8, 1);
        let t = text(3, 8, 2);
        let lat = latitude_profile(4);
        let p = perturbed_params(8, 2, 1);
        let base = dasm_forward(&v, &t, &lat, &p).unwrap();
        for cols in [1isize, 4] {
            let shifted = dasm_forward(&v.wrap_shift_columns(cols), &t, &lat, &p).unwrap();
            let want = base.wrap_shift_columns(cols);
            assert!(shifted.tokens.max_abs_diff(&want.tokens) < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn attention_rows_sum_to_one(seed in any::<u64>(), l in 1usize..10, c in 1usize..6) {
            let v = rand_tensor(&[l, 8], seed);
            let t = rand_tensor(&[c, 8], seed ^ 1);
            let p = DasmParams::init(8, 4, seed).unwrap();
            for (q, kv, w) in [(&v, &t, &p.inject), (&v, &v, &p.reagg.attention)] {
                for pr in attention_probabilities(q, kv, w, 4).unwrap() {
                    for i in 0..pr.shape()[0] {
                        let s: f64 = pr.row(i).iter().map(|&x| x as f64).sum();
                        prop_assert!((s - 1.0).abs() <= 1e-6);
                    }
                }
            }
        }

        #[test]
        fn gates_in_open_interval_and_fusion_bounded(seed in any::<u64>(), lh in -2.0f64..2.0, ll in -2.0f64..2.0) {
            let f = tokens((2, 4), 4, seed);
            let h = tokens((2, 4), 4, seed ^ 7);
            let l = tokens((2, 4), 4, seed ^ 9);
            let t = text(2, 4, seed ^ 3);
            let mut p = DasmParams::init(4, 2, seed).unwrap();
            p.lambda_h = lh;
            p.lambda_l = ll;
            let gc = channel_gate(&t, &p).unwrap();
            let gs = spatial_gate(&f);
            prop_assert!(gc.iter().chain(&gs).all(|&g| g > 0.0 && g < 1.0));
            let out = hybrid_gated_fuse(&f, &h, &l, &t, &p).unwrap();
            for i in 0..out.tokens.len() {
                let diff = (out.tokens.data()[i] - f.tokens.data()[i]).abs() as f64;
                let bound = lh.abs() * h.tokens.data()[i].abs() as f64 + ll.abs() * l.tokens.data()[i].abs() as f64;
                prop_assert!(diff <= bound + 1e-6);
            }
        }
    }
}
