//! Saliency-style evaluation: KLD, SIM and NSS per (image, class), with
//! per-class and overall aggregates.
//!
//! Every reduction over pixels sums its terms in ascending order, so a metric
//! depends only on the multiset of per-pixel values. Jointly permuting the
//! pixels of prediction and ground truth (a wraparound shift in particular)
//! therefore leaves every metric bit-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::erp::{blur_supervision, keypoints_to_heatmap, KeypointAnnotation, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{pft, Tensor, STD_FLOOR};

/// Normalization stabilizer for KLD and SIM.
pub const METRIC_EPS: f64 = 1e-8;

fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// `(x + ε) / Σ(x + ε)` with an order-independent denominator.
fn distribution(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    if let Some(v) = t.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("{what} contains invalid value {v}")));
    }
    let shifted: Vec<f64> = t.data().iter().map(|&v| v as f64 + METRIC_EPS).collect();
    let z = ordered_sum(shifted.clone());
    Ok(shifted.into_iter().map(|v| v / z).collect())
}

/// `Σ ĝ·ln((ĝ+ε)/(p̂+ε))` with ground truth as the reference distribution.
pub fn kld_metric(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let p = distribution(pred, "prediction")?;
    let g = distribution(gt, "ground truth")?;
    Ok(ordered_sum(
        g.iter()
            .zip(&p)
            .map(|(&g, &p)| g * ((g + METRIC_EPS) / (p + METRIC_EPS)).ln())
            .collect(),
    ))
}

/// Histogram intersection `Σ min(p̂, ĝ)` in `[0, 1]`.
pub fn sim_metric(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let p = distribution(pred, "prediction")?;
    let g = distribution(gt, "ground truth")?;
    Ok(ordered_sum(
        p.iter().zip(&g).map(|(a, b)| a.min(*b)).collect(),
    ))
}

/// Mean of the standardized prediction at keypoint pixels `(u, v)`.
pub fn nss_metric(pred: &Tensor, keypoints: &[[u32; 2]]) -> Result<f64> {
    let (h, w) = pred.dims2()?;
    if keypoints.is_empty() {
        return Err(Error::param("nss needs at least one keypoint"));
    }
    if let Some([u, v]) = keypoints
        .iter()
        .find(|[u, v]| *u as usize >= w || *v as usize >= h)
    {
        return Err(Error::Domain(format!("keypoint ({u},{v}) outside {w}x{h}")));
    }
    let vals: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let n = vals.len() as f64;
    let mean = ordered_sum(vals.clone()) / n;
    let var = ordered_sum(vals.iter().map(|v| (v - mean).powi(2)).collect()) / n;
    let std = var.sqrt().max(STD_FLOOR);
    let total: f64 = keypoints
        .iter()
        .map(|&[u, v]| (vals[v as usize * w + u as usize] - mean) / std)
        .sum();
    Ok(total / keypoints.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub class: String,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub count: usize,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

impl MetricMeans {
    fn of<'a>(records: impl Iterator<Item = &'a MetricRecord>) -> Self {
        let (mut n, mut k, mut s, mut z) = (0usize, 0f64, 0f64, 0f64);
        for r in records {
            n += 1;
            k += r.kld;
            s += r.sim;
            z += r.nss;
        }
        let d = n.max(1) as f64;
        Self {
            count: n,
            kld: k / d,
            sim: s / d,
            nss: z / d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Sorted by `(image_id, class)`.
    pub per_image: Vec<MetricRecord>,
    pub per_class: BTreeMap<String, MetricMeans>,
    /// Per-class means weighted by their sample counts.
    pub overall: MetricMeans,
    /// Unweighted mean of the per-class means.
    pub class_balanced: MetricMeans,
    pub skipped: Vec<SkippedImage>,
}

impl MetricReport {
    pub fn from_records(mut per_image: Vec<MetricRecord>, mut skipped: Vec<SkippedImage>) -> Self {
        per_image.sort_by(|a, b| (&a.image_id, &a.class).cmp(&(&b.image_id, &b.class)));
        skipped.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let classes: BTreeSet<&str> = per_image.iter().map(|r| r.class.as_str()).collect();
        let per_class: BTreeMap<String, MetricMeans> = classes
            .into_iter()
            .map(|c| {
                (
                    c.to_string(),
                    MetricMeans::of(per_image.iter().filter(|r| r.class == c)),
                )
            })
            .collect();
        let total = per_image.len();
        let weighted = |f: fn(&MetricMeans) -> f64| {
            per_class
                .values()
                .map(|m| f(m) * m.count as f64)
                .sum::<f64>()
                / total.max(1) as f64
        };
        let overall = MetricMeans {
            count: total,
            kld: weighted(|m| m.kld),
            sim: weighted(|m| m.sim),
            nss: weighted(|m| m.nss),
        };
        let nc = per_class.len().max(1) as f64;
        let balanced = |f: fn(&MetricMeans) -> f64| per_class.values().map(f).sum::<f64>() / nc;
        let class_balanced = MetricMeans {
            count: per_class.len(),
            kld: balanced(|m| m.kld),
            sim: balanced(|m| m.sim),
            nss: balanced(|m| m.nss),
        };
        Self {
            per_image,
            per_class,
            overall,
            class_balanced,
            skipped,
        }
    }

    /// True when every annotated image was evaluated and at least one record exists.
    pub fn is_complete(&self) -> bool {
        self.skipped.is_empty() && !self.per_image.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "image_id,class,kld,sim,nss")?;
        for r in &self.per_image {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.image_id, r.class, r.kld, r.sim, r.nss
            )?;
        }
        Ok(())
    }

    /// Writes `<path>` as JSON and the same path with a `.csv` extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?)?;
        let mut csv = Vec::new();
        self.write_csv(&mut csv)?;
        fs::write(path.with_extension("csv"), csv)?;
        Ok(())
    }
}

/// Loads annotations from a JSON file (one object or an array) or from every
/// `*.json` file in a directory. Image ids must be unique.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<KeypointAnnotation>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        for f in files {
            out.extend(parse_annotations(
                &fs::read_to_string(&f)?,
                &f.display().to_string(),
            )?);
        }
    } else {
        out = parse_annotations(&fs::read_to_string(path)?, &path.display().to_string())?;
    }
    let mut seen = BTreeSet::new();
    for a in &out {
        if !seen.insert(a.image_id.as_str()) {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("duplicate image id `{}`", a.image_id),
            });
        }
    }
    Ok(out)
}

fn parse_annotations(text: &str, origin: &str) -> Result<Vec<KeypointAnnotation>> {
    if text.trim_start().starts_with('[') {
        let list: Vec<KeypointAnnotation> =
            serde_json::from_str(text).map_err(|e| Error::Format {
                path: origin.to_string(),
                reason: e.to_string(),
            })?;
        list.iter().try_for_each(KeypointAnnotation::validate)?;
        Ok(list)
    } else {
        Ok(vec![KeypointAnnotation::from_json(text, origin)?])
    }
}

/// Ground-truth heatmap used for evaluation: keypoint Gaussians, then blur.
pub fn ground_truth(
    ann: &KeypointAnnotation,
    classes: &Vocabulary,
    sigma_px: f64,
) -> Result<Tensor> {
    blur_supervision(&keypoints_to_heatmap(ann, classes, sigma_px)?, sigma_px)
}

/// Records for every class with at least one keypoint in `ann`.
pub fn evaluate_image(
    pred: &Tensor,
    ann: &KeypointAnnotation,
    classes: &Vocabulary,
    sigma_px: f64,
) -> Result<Vec<MetricRecord>> {
    let gt = ground_truth(ann, classes, sigma_px)?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "{}: prediction {:?}, expected {:?}",
            ann.image_id,
            pred.shape(),
            gt.shape()
        )));
    }
    let (_, h, w) = gt.dims3()?;
    let mut out = Vec::new();
    for (c, name) in classes.names().iter().enumerate() {
        let points = ann.points_for(name);
        if points.is_empty() {
            continue;
        }
        let p = Tensor::new(vec![h, w], pred.row(c).to_vec())?;
        let g = Tensor::new(vec![h, w], gt.row(c).to_vec())?;
        out.push(MetricRecord {
            image_id: ann.image_id.clone(),
            class: name.clone(),
            kld: kld_metric(&p, &g)?,
            sim: sim_metric(&p, &g)?,
            nss: nss_metric(&p, &points)?,
        });
    }
    Ok(out)
}

/// Evaluates `<pred_dir>/<image_id>.pft` (C×H×W, vocabulary order) for each
/// annotation. Missing prediction files are reported as skipped. `jobs`
/// bounds the worker count; the report does not depend on it.
pub fn evaluate_dataset(
    pred_dir: impl AsRef<Path>,
    annotations: &[KeypointAnnotation],
    classes: &Vocabulary,
    sigma_px: f64,
    jobs: usize,
) -> Result<MetricReport> {
    if jobs == 0 {
        return Err(Error::param("jobs must be >= 1"));
    }
    let pred_dir = pred_dir.as_ref();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::param(format!("cannot build worker pool: {e}")))?;
    enum Outcome {
        Done(Vec<MetricRecord>),
        Skipped(SkippedImage),
    }
    let outcomes: Vec<Result<Outcome>> = pool.install(|| {
        annotations
            .par_iter()
            .map(|ann| {
                let file = pred_dir.join(format!("{}.pft", ann.image_id));
                if !file.is_file() {
                    return Ok(Outcome::Skipped(SkippedImage {
                        image_id: ann.image_id.clone(),
                        reason: format!("missing prediction {}", file.display()),
                    }));
                }
                let pred = pft::read(&file)?;
                Ok(Outcome::Done(evaluate_image(
                    &pred, ann, classes, sigma_px,
                )?))
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o? {
            Outcome::Done(r) => records.extend(r),
            Outcome::Skipped(s) => skipped.push(s),
        }
    }
    Ok(MetricReport::from_records(records, skipped))
}
