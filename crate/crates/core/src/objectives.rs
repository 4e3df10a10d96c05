//! Training objective: pixel BCE, distribution KL and region-text InfoNCE,
//! with analytic gradients and a small gradient-descent demo.
//!
//! Loss arithmetic runs in `f64`. The `*_f64` entry points take raw slices
//! so gradient checks can perturb inputs without `f32` rounding.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dasm::VisualTokens;
use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Stabilizer inside the KL log ratio and the pooling denominator.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
            tau: 0.07,
            eps: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| !(*l >= 0.0) || !l.is_finite())
        {
            return Err(Error::param("loss weights must be finite and non-negative"));
        }
        if !(self.tau > 0.0) || !(self.eps > 0.0) {
            return Err(Error::param("tau and eps must be positive"));
        }
        Ok(())
    }

    /// Parses `"λ1,λ2,λ3"`, keeping the default `tau` and `eps`.
    pub fn parse_triplet(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::param(format!(
                "expected three comma-separated weights, got `{s}`"
            )));
        }
        let mut vals = [0f64; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p
                .parse()
                .map_err(|_| Error::param(format!("invalid weight `{p}`")))?;
        }
        let w = Self {
            lambda1: vals[0],
            lambda2: vals[1],
            lambda3: vals[2],
            ..Self::default()
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub kl: f64,
    pub rtc: f64,
    pub total: f64,
}

pub fn total_loss(bce: f64, kl: f64, rtc: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        bce,
        kl,
        rtc,
        total: w.lambda1 * bce + w.lambda2 * kl + w.lambda3 * rtc,
    }
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `−[t·log σ(x) + (1−t)·log(1−σ(x))]` in the overflow-free logit form.
#[inline]
fn bce_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

pub fn bce_loss_f64(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::shape(
            "bce: logits and target must have equal, non-zero length",
        ));
    }
    if let Some(t) = target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(format!("bce target {t} outside [0, 1]")));
    }
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| bce_term(x, t))
        .sum::<f64>()
        / n)
}

/// Mean pixelwise binary cross-entropy of `logits` against `target ∈ [0,1]`.
pub fn bce_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(Error::shape("bce: logits and target shapes differ"));
    }
    bce_loss_f64(&to_f64(logits), &to_f64(target))
}

const NORMALIZED_TOL: f64 = 1e-4;

pub fn kl_loss_f64(pred: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("kl: inputs must have equal, non-zero length"));
    }
    for (name, d) in [("prediction", pred), ("ground truth", gt)] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::Contract(format!(
                "kl: {name} sums to {s}, expected 1"
            )));
        }
    }
    Ok(gt
        .iter()
        .zip(pred)
        .map(|(&g, &p)| g * ((g + eps) / (p + eps)).ln())
        .sum())
}

/// `Σ ĝ·ln((ĝ+ε)/(p+ε))` for two distributions (each must sum to 1).
pub fn kl_loss(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("kl: shapes differ"));
    }
    kl_loss_f64(&to_f64(pred), &to_f64(gt), eps)
}

/// `(x + eps) / Σ(x + eps)` over `f64` values.
pub fn normalize_f64(x: &[f64], eps: f64) -> Vec<f64> {
    let z: f64 = x.iter().map(|v| v + eps).sum();
    x.iter().map(|v| (v + eps) / z).collect()
}

/// BCE target derived from a ground-truth map: used as-is when it already
/// lies in `[0,1]`, otherwise rescaled to peak 1.
pub fn bce_target(gt: &[f64]) -> Result<Vec<f64>> {
    if gt.iter().any(|&g| g < 0.0 || !g.is_finite()) {
        return Err(Error::Domain(
            "ground truth must be finite and non-negative".into(),
        ));
    }
    let mx = gt.iter().copied().fold(0.0, f64::max);
    Ok(if mx > 1.0 {
        gt.iter().map(|g| g / mx).collect()
    } else {
        gt.to_vec()
    })
}

/// `(BCE(x, target), KL(normalize(σ(x)) ‖ normalize(gt)))`.
pub fn heatmap_losses_f64(
    logits: &[f64],
    target: &[f64],
    gt: &[f64],
    eps: f64,
) -> Result<(f64, f64)> {
    let bce = bce_loss_f64(logits, target)?;
    let s: Vec<f64> = logits.iter().map(|&x| sigmoid_scalar(x)).collect();
    let kl = kl_loss_f64(&normalize_f64(&s, eps), &normalize_f64(gt, eps), eps)?;
    Ok((bce, kl))
}

/// `λ₁·BCE + λ₂·KL` as a scalar.
pub fn heatmap_objective_f64(
    logits: &[f64],
    target: &[f64],
    gt: &[f64],
    w: &LossWeights,
) -> Result<f64> {
    let (bce, kl) = heatmap_losses_f64(logits, target, gt, w.eps)?;
    Ok(w.lambda1 * bce + w.lambda2 * kl)
}

pub fn grad_bce_kl_wrt_logits_f64(
    logits: &[f64],
    target: &[f64],
    gt: &[f64],
    w: &LossWeights,
) -> Result<Vec<f64>> {
    let n = logits.len();
    if target.len() != n || gt.len() != n || n == 0 {
        return Err(Error::shape("gradient inputs must share a non-zero length"));
    }
    let eps = w.eps;
    let s: Vec<f64> = logits.iter().map(|&x| sigmoid_scalar(x)).collect();
    let z: f64 = s.iter().map(|v| v + eps).sum();
    let p: Vec<f64> = s.iter().map(|v| (v + eps) / z).collect();
    let g = normalize_f64(gt, eps);
    // d KL / d s_j = (Σ_i g_i p_i/(p_i+ε) − g_j/(p_j+ε)) / Z
    let shared: f64 = g.iter().zip(&p).map(|(gi, pi)| gi * pi / (pi + eps)).sum();
    Ok((0..n)
        .map(|j| {
            let dbce = (s[j] - target[j]) / n as f64;
            let dkl_ds = (shared - g[j] / (p[j] + eps)) / z;
            w.lambda1 * dbce + w.lambda2 * dkl_ds * s[j] * (1.0 - s[j])
        })
        .collect())
}

/// Gradient of `λ₁·BCE(x, target) + λ₂·KL(normalize(σ(x)) ‖ normalize(gt))`
/// with respect to every logit.
pub fn grad_bce_kl_wrt_logits(
    logits: &Tensor,
    target: &Tensor,
    gt: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    if logits.shape() != target.shape() || logits.shape() != gt.shape() {
        return Err(Error::shape("gradient inputs must share a shape"));
    }
    let grad = grad_bce_kl_wrt_logits_f64(&to_f64(logits), &to_f64(target), &to_f64(gt), w)?;
    Tensor::new(
        logits.shape().to_vec(),
        grad.into_iter().map(|v| v as f32).collect(),
    )
}

/// Mask-weighted mean token per class: `Σ_l M[c,l]·f_l / (Σ_l M[c,l] + ε)`.
pub fn region_pool(v: &VisualTokens, mask: &Tensor, eps: f64) -> Result<Tensor> {
    let (c, l) = mask.dims2()?;
    if l != v.len() {
        return Err(Error::shape(format!(
            "mask has {l} columns for {} tokens",
            v.len()
        )));
    }
    if mask.data().iter().any(|&m| m < 0.0) {
        return Err(Error::Domain("region masks must be non-negative".into()));
    }
    let d = v.dim();
    let mut out = Vec::with_capacity(c * d);
    for ch in 0..c {
        let m = mask.row(ch);
        let denom = m.iter().map(|&x| x as f64).sum::<f64>() + eps;
        for k in 0..d {
            let num: f64 = m
                .iter()
                .enumerate()
                .map(|(i, &w)| w as f64 * v.tokens.at2(i, k) as f64)
                .sum();
            out.push((num / denom) as f32);
        }
    }
    Tensor::new(vec![c, d], out)
}

const NORM_FLOOR: f64 = 1e-8;

fn unit_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in x.chunks(d) {
        let n = row
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(NORM_FLOOR);
        norms.push(n);
        unit.extend(row.iter().map(|v| v / n));
    }
    (unit, norms)
}

struct RtcForward {
    unit_regions: Vec<f64>,
    region_norms: Vec<f64>,
    unit_text: Vec<f64>,
    text_norms: Vec<f64>,
    /// Row softmax of cosine / τ, C×C.
    probs: Vec<f64>,
}

fn rtc_forward(regions: &[f64], text: &[f64], d: usize, tau: f64) -> RtcForward {
    let c = regions.len() / d;
    let (a, an) = unit_rows(regions, d);
    let (b, bn) = unit_rows(text, d);
    let mut probs = vec![0f64; c * c];
    for i in 0..c {
        let row: Vec<f64> = (0..c)
            .map(|k| {
                a[i * d..(i + 1) * d]
                    .iter()
                    .zip(&b[k * d..(k + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    / tau
            })
            .collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for k in 0..c {
            probs[i * c + k] = (row[k] - mx).exp() / z;
        }
    }
    RtcForward {
        unit_regions: a,
        region_norms: an,
        unit_text: b,
        text_norms: bn,
        probs,
    }
}

fn check_rtc(regions: &[f64], text: &[f64], d: usize, tau: f64) -> Result<usize> {
    if d == 0
        || regions.len() != text.len()
        || regions.is_empty()
        || !regions.len().is_multiple_of(d)
    {
        return Err(Error::shape(
            "rtc: regions and text must both be C×D with C >= 1",
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::param("rtc: tau must be > 0"));
    }
    Ok(regions.len() / d)
}

pub fn rtc_loss_f64(regions: &[f64], text: &[f64], d: usize, tau: f64) -> Result<f64> {
    let c = check_rtc(regions, text, d, tau)?;
    let f = rtc_forward(regions, text, d, tau);
    let loss: f64 = (0..c).map(|i| -f.probs[i * c + i].ln()).sum();
    Ok(loss / c as f64)
}

/// InfoNCE over classes with cosine similarity: region `c` should match
/// text `c` against every other class text.
pub fn rtc_loss(regions: &Tensor, text: &Tensor, tau: f64) -> Result<f64> {
    let (_, d) = regions.dims2()?;
    if regions.shape() != text.shape() {
        return Err(Error::shape("rtc: regions and text shapes differ"));
    }
    rtc_loss_f64(&to_f64(regions), &to_f64(text), d, tau)
}

/// Back-propagates through the row normalization `x/‖x‖` (norm floor
/// treated as a constant).
fn through_normalization(grad_unit: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    if norm <= NORM_FLOOR {
        return grad_unit.iter().map(|g| g / norm).collect();
    }
    let proj: f64 = grad_unit.iter().zip(unit).map(|(g, u)| g * u).sum();
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, u)| (g - proj * u) / norm)
        .collect()
}

/// Gradients of the InfoNCE loss with respect to regions and text.
pub fn grad_rtc_f64(
    regions: &[f64],
    text: &[f64],
    d: usize,
    tau: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = check_rtc(regions, text, d, tau)?;
    let RtcForward {
        unit_regions: a,
        region_norms: an,
        unit_text: b,
        text_norms: bn,
        probs,
    } = rtc_forward(regions, text, d, tau);
    // dL/ds_ik = (P_ik − δ_ik) / (C τ)
    let gs: Vec<f64> = (0..c * c)
        .map(|idx| (probs[idx] - if idx / c == idx % c { 1.0 } else { 0.0 }) / (c as f64 * tau))
        .collect();
    let mut g_regions = Vec::with_capacity(c * d);
    let mut g_text = Vec::with_capacity(c * d);
    for i in 0..c {
        let mut ga = vec![0f64; d];
        for k in 0..c {
            for (g, bv) in ga.iter_mut().zip(&b[k * d..(k + 1) * d]) {
                *g += gs[i * c + k] * bv;
            }
        }
        g_regions.extend(through_normalization(&ga, &a[i * d..(i + 1) * d], an[i]));
    }
    for k in 0..c {
        let mut gb = vec![0f64; d];
        for i in 0..c {
            for (g, av) in gb.iter_mut().zip(&a[i * d..(i + 1) * d]) {
                *g += gs[i * c + k] * av;
            }
        }
        g_text.extend(through_normalization(&gb, &b[k * d..(k + 1) * d], bn[k]));
    }
    Ok((g_regions, g_text))
}

pub fn grad_rtc_wrt_regions(regions: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    let (_, d) = regions.dims2()?;
    if regions.shape() != text.shape() {
        return Err(Error::shape("rtc: regions and text shapes differ"));
    }
    let (g, _) = grad_rtc_f64(&to_f64(regions), &to_f64(text), d, tau)?;
    Tensor::new(
        regions.shape().to_vec(),
        g.into_iter().map(|v| v as f32).collect(),
    )
}

pub fn grad_rtc_wrt_text(regions: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    let (_, d) = regions.dims2()?;
    if regions.shape() != text.shape() {
        return Err(Error::shape("rtc: regions and text shapes differ"));
    }
    let (_, g) = grad_rtc_f64(&to_f64(regions), &to_f64(text), d, tau)?;
    Tensor::new(
        text.shape().to_vec(),
        g.into_iter().map(|v| v as f32).collect(),
    )
}

#[derive(Clone, Debug)]
pub struct ToyRun {
    pub logits: Tensor,
    /// One entry for the initial logits plus one per step.
    pub trace: Vec<LossBreakdown>,
}

impl ToyRun {
    /// `normalize(σ(logits))`, the heatmap the KL term compares.
    pub fn prediction(&self, eps: f64) -> Tensor {
        let s: Vec<f64> = self
            .logits
            .data()
            .iter()
            .map(|&x| sigmoid_scalar(x as f64))
            .collect();
        Tensor::new(
            self.logits.shape().to_vec(),
            normalize_f64(&s, eps)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        )
        .expect("same shape")
    }
}

/// Initial logit spread of the demo.
const INIT_STD: f64 = 0.01;

/// Plain gradient descent of `λ₁·BCE + λ₂·KL` on free logits.
///
/// `lr` is a per-pixel step: the update is `lr · H·W · ∇`, i.e. descent on
/// the pixel-summed objective, so the step does not shrink with image size.
/// The RTC term has no heatmap input and is reported as 0.
pub fn toy_optimize(
    gt: &Tensor,
    steps: usize,
    lr: f64,
    w: &LossWeights,
    seed: u64,
) -> Result<ToyRun> {
    w.validate()?;
    if !(lr > 0.0) {
        return Err(Error::param("learning rate must be positive"));
    }
    let g = to_f64(gt);
    let target = bce_target(&g)?;
    let n = g.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let record = |x: &[f64]| -> Result<LossBreakdown> {
        let (bce, kl) = heatmap_losses_f64(x, &target, &g, w.eps)?;
        Ok(total_loss(bce, kl, 0.0, w))
    };
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(record(&x)?);
    let step = lr * n as f64;
    for _ in 0..steps {
        let grad = grad_bce_kl_wrt_logits_f64(&x, &target, &g, w)?;
        x.iter_mut()
            .zip(&grad)
            .for_each(|(xi, gi)| *xi -= step * gi);
        trace.push(record(&x)?);
    }
    Ok(ToyRun {
        logits: Tensor::new(
            gt.shape().to_vec(),
            x.into_iter().map(|v| v as f32).collect(),
        )?,
        trace,
    })
}

/// Two Gaussian blobs (peak 1) on an H×W panorama, with wraparound columns.
pub fn two_blob_target(height: usize, width: usize) -> Tensor {
    let (h, w) = (height as f64, width as f64);
    let blobs = [
        (10.0 / 32.0 * h, 16.0 / 64.0 * w, 4.0 / 32.0 * h),
        (21.0 / 32.0 * h, 46.0 / 64.0 * w, 5.0 / 32.0 * h),
    ];
    Tensor::from_fn(&[height, width], |i| {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        blobs
            .iter()
            .map(|&(cy, cx, s)| {
                let du = (x - cx).abs();
                let du = du.min(w - du);
                (-((y - cy).powi(2) + du * du) / (2.0 * s * s)).exp()
            })
            .fold(0.0, f64::max) as f32
    })
}

/// CSV with header `step,bce,kl,rtc,total`.
pub fn write_trace_csv(trace: &[LossBreakdown], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,bce,kl,rtc,total")?;
    for (i, t) in trace.iter().enumerate() {
        writeln!(out, "{i},{},{},{},{}", t.bce, t.kl, t.rtc, t.total)?;
    }
    Ok(())
}
