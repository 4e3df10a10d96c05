//! Configuration, parameter initialization and storage, and the end-to-end
//! forward pass from patch features and class embeddings to pixel heatmaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dasm::{
    dasm_forward, AttentionWeights, DasmParams, ReaggregationWeights, TextEmbeddings, VisualTokens,
    DEFAULT_LAMBDA, DEFAULT_SIGMA_LF,
};
use crate::erp::{default_sigma_px, latitude_profile, AugmentRanges, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{pft, Tensor};
use crate::objectives::LossWeights;
use crate::osdh::{osdh_forward, to_pixel_map, AffordanceMap, OsdhParams};

/// Backbone patch size in pixels.
pub const PATCH_STRIDE: usize = 14;

pub const DEFAULT_CLASSES: [&str; 19] = [
    "cook", "cut", "display", "grasp", "hang", "lean", "lie", "open", "place", "pour", "push",
    "sit", "step", "store", "switch", "type", "wash", "wear", "write",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dim: usize,
    pub heads: usize,
    /// Token grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Output image size `(height, width)`.
    pub image: (usize, usize),
    pub classes: Vocabulary,
    pub sigma_lf: f64,
    pub lambda_h: f64,
    pub lambda_l: f64,
    pub inject_residual: bool,
    pub inject_output_projection: bool,
    pub osdh: OsdhParams,
    pub loss: LossWeights,
    pub sigma_px: f64,
    pub augment: AugmentRanges,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let image = (560, 1120);
        Self {
            dim: 64,
            heads: 8,
            grid: (image.0 / PATCH_STRIDE, image.1 / PATCH_STRIDE),
            image,
            classes: Vocabulary::new(DEFAULT_CLASSES),
            sigma_lf: DEFAULT_SIGMA_LF,
            lambda_h: DEFAULT_LAMBDA,
            lambda_l: DEFAULT_LAMBDA,
            inject_residual: true,
            inject_output_projection: true,
            osdh: OsdhParams::default(),
            loss: LossWeights::default(),
            sigma_px: default_sigma_px(image.0),
            augment: AugmentRanges::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Config whose image size follows the grid under the patch stride.
    pub fn with_grid(grid: (usize, usize)) -> Self {
        let image = (grid.0 * PATCH_STRIDE, grid.1 * PATCH_STRIDE);
        Self {
            grid,
            image,
            sigma_px: default_sigma_px(image.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.grid.0 == 0
            || self.grid.1 == 0
            || self.image != (self.grid.0 * PATCH_STRIDE, self.grid.1 * PATCH_STRIDE)
        {
            return Err(Error::config(format!(
                "grid {:?} does not match image {:?} at stride {PATCH_STRIDE}",
                self.grid, self.image
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::config("empty class vocabulary"));
        }
        if !(self.sigma_lf > 0.0) || !(self.sigma_px > 0.0) {
            return Err(Error::config("sigma_lf and sigma_px must be positive"));
        }
        if !self.lambda_h.is_finite() || !self.lambda_l.is_finite() {
            return Err(Error::config("fusion weights must be finite"));
        }
        self.osdh.validate()?;
        self.loss
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        self.augment.validate()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg: Self =
            serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams {
    pub dasm: DasmParams,
    pub osdh: OsdhParams,
}

pub fn init_params(cfg: &PipelineConfig) -> Result<PipelineParams> {
    cfg.validate()?;
    let mut dasm = DasmParams::init(cfg.dim, cfg.heads, cfg.seed)?;
    dasm.sigma_lf = cfg.sigma_lf;
    dasm.lambda_h = cfg.lambda_h;
    dasm.lambda_l = cfg.lambda_l;
    dasm.inject_residual = cfg.inject_residual;
    dasm.inject_output_projection = cfg.inject_output_projection;
    Ok(PipelineParams {
        dasm,
        osdh: cfg.osdh,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    heads: usize,
    sigma_lf: f64,
    lambda_h: f64,
    lambda_l: f64,
    inject_residual: bool,
    inject_output_projection: bool,
    seed: u64,
    osdh: OsdhParams,
    /// Tensor name → shape; each is stored as `<name>.pft`.
    tensors: BTreeMap<String, Vec<usize>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn attention_tensors(prefix: &str, a: &AttentionWeights, out: &mut BTreeMap<String, Tensor>) {
    for (n, t) in [
        ("q", &a.query),
        ("k", &a.key),
        ("v", &a.value),
        ("o", &a.output),
    ] {
        out.insert(format!("{prefix}.{n}"), t.clone());
    }
}

fn named_tensors(p: &DasmParams) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    attention_tensors("inject", &p.inject, &mut out);
    attention_tensors("reagg", &p.reagg.attention, &mut out);
    out.insert("hfem_pointwise".into(), p.hfem_pointwise.clone());
    out.insert("lfsm_pointwise".into(), p.lfsm_pointwise.clone());
    out.insert("gate_text".into(), p.gate_text.clone());
    out.insert("reagg.ffn_in".into(), p.reagg.ffn_in.clone());
    out.insert("reagg.ffn_out".into(), p.reagg.ffn_out.clone());
    let r = &p.reagg;
    for (n, v) in [
        ("gate_bias", &p.gate_bias),
        ("reagg.norm1_scale", &r.norm1_scale),
        ("reagg.norm1_offset", &r.norm1_offset),
        ("reagg.norm2_scale", &r.norm2_scale),
        ("reagg.norm2_offset", &r.norm2_offset),
    ] {
        out.insert(n.into(), Tensor::vector(v.clone()));
    }
    out
}

impl PipelineParams {
    /// Writes every weight as `<name>.pft` plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let tensors = named_tensors(&self.dasm);
        for (name, t) in &tensors {
            pft::write(dir.join(format!("{name}.pft")), t)?;
        }
        let d = &self.dasm;
        let manifest = Manifest {
            heads: d.heads,
            sigma_lf: d.sigma_lf,
            lambda_h: d.lambda_h,
            lambda_l: d.lambda_l,
            inject_residual: d.inject_residual,
            inject_output_projection: d.inject_output_projection,
            seed: d.seed,
            osdh: self.osdh,
            tensors: tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.shape().to_vec()))
                .collect(),
        };
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let m: Manifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path)?).map_err(|e| {
                Error::Format {
                    path: manifest_path.display().to_string(),
                    reason: e.to_string(),
                }
            })?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in &m.tensors {
            let t = pft::read(dir.join(format!("{name}.pft")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "{name}: manifest shape {shape:?}, file shape {:?}",
                    t.shape()
                )));
            }
            tensors.insert(name.clone(), t);
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::config(format!("parameter `{name}` missing from manifest")))
        };
        let mut attention = |prefix: &str| -> Result<AttentionWeights> {
            Ok(AttentionWeights {
                query: take(&format!("{prefix}.q"))?,
                key: take(&format!("{prefix}.k"))?,
                value: take(&format!("{prefix}.v"))?,
                output: take(&format!("{prefix}.o"))?,
            })
        };
        let inject = attention("inject")?;
        let reagg_attention = attention("reagg")?;
        let mut vec = |name: &str| take(name).map(Tensor::into_data);
        let gate_bias = vec("gate_bias")?;
        let norm1_scale = vec("reagg.norm1_scale")?;
        let norm1_offset = vec("reagg.norm1_offset")?;
        let norm2_scale = vec("reagg.norm2_scale")?;
        let norm2_offset = vec("reagg.norm2_offset")?;
        let dasm = DasmParams {
            heads: m.heads,
            inject,
            inject_residual: m.inject_residual,
            inject_output_projection: m.inject_output_projection,
            sigma_lf: m.sigma_lf,
            hfem_pointwise: take("hfem_pointwise")?,
            lfsm_pointwise: take("lfsm_pointwise")?,
            gate_text: take("gate_text")?,
            gate_bias,
            lambda_h: m.lambda_h,
            lambda_l: m.lambda_l,
            reagg: ReaggregationWeights {
                attention: reagg_attention,
                ffn_in: take("reagg.ffn_in")?,
                ffn_out: take("reagg.ffn_out")?,
                norm1_scale,
                norm1_offset,
                norm2_scale,
                norm2_offset,
            },
            seed: m.seed,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::config(format!("unexpected parameter `{extra}`")));
        }
        dasm.validate()?;
        m.osdh.validate()?;
        Ok(Self { dasm, osdh: m.osdh })
    }
}

/// Wraps raw L×D features and C×D embeddings, checking them against `cfg`.
pub fn prepare_inputs(
    features: Tensor,
    text: Tensor,
    cfg: &PipelineConfig,
) -> Result<(VisualTokens, TextEmbeddings)> {
    let (l, d) = features.dims2()?;
    let (c, dt) = text.dims2()?;
    if d != cfg.dim || dt != cfg.dim {
        return Err(Error::shape(format!(
            "feature dim {d} / text dim {dt}, config dim {}",
            cfg.dim
        )));
    }
    if l != cfg.grid.0 * cfg.grid.1 {
        return Err(Error::shape(format!(
            "{l} tokens, config grid {}x{}",
            cfg.grid.0, cfg.grid.1
        )));
    }
    if c != cfg.classes.len() {
        return Err(Error::shape(format!(
            "{c} text embeddings for {} configured classes",
            cfg.classes.len()
        )));
    }
    Ok((
        VisualTokens::new(features, cfg.grid)?,
        TextEmbeddings::new(text, cfg.classes.names().to_vec())?,
    ))
}

/// Modulate tokens, densify per class, resize to the configured image.
/// Output channels follow the vocabulary order.
pub fn forward(
    v: &VisualTokens,
    t: &TextEmbeddings,
    params: &PipelineParams,
    cfg: &PipelineConfig,
) -> Result<AffordanceMap> {
    if v.grid != cfg.grid {
        return Err(Error::shape(format!(
            "token grid {:?}, config grid {:?}",
            v.grid, cfg.grid
        )));
    }
    if t.class_names != cfg.classes.names() {
        return Err(Error::shape(
            "text embedding classes differ from the configured vocabulary",
        ));
    }
    let lat = latitude_profile(cfg.grid.0);
    let modulated = dasm_forward(v, t, &lat, &params.dasm)?;
    let refined = osdh_forward(&modulated, t, &params.osdh)?;
    to_pixel_map(&refined, cfg.image.0, cfg.image.1)
}

/// Seeded standard-normal tensor, used for synthetic features in demos and tests.
pub fn random_normal(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erp::wrap_shift;

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            dim: 16,
            heads: 4,
            classes: Vocabulary::new(["grasp", "lie", "sit"]),
            osdh: OsdhParams {
                k: 4,
                ..OsdhParams::default()
            },
            ..PipelineConfig::with_grid((4, 8))
        }
    }

    fn inputs(cfg: &PipelineConfig, seed: u64) -> (VisualTokens, TextEmbeddings) {
        let l = cfg.grid.0 * cfg.grid.1;
        prepare_inputs(
            random_normal(&[l, cfg.dim], seed),
            random_normal(&[cfg.classes.len(), cfg.dim], seed + 1),
            cfg,
        )
        .unwrap()
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid, (40, 80));
        assert_eq!(cfg.classes.len(), 19);
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_inconsistencies() {
        let bad_heads = PipelineConfig {
            heads: 5,
            ..small_config()
        };
        assert!(matches!(init_params(&bad_heads), Err(Error::Config(_))));
        let bad_grid = PipelineConfig {
            grid: (4, 9),
            ..small_config()
        };
        assert!(matches!(bad_grid.validate(), Err(Error::Config(_))));
        let bad_aug = PipelineConfig {
            augment: AugmentRanges {
                max_rotation_deg: 10.0,
                ..AugmentRanges::default()
            },
            ..small_config()
        };
        assert!(bad_aug.validate().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn params_are_seed_deterministic_and_round_trip() {
        let cfg = small_config();
        let a = init_params(&cfg).unwrap();
        assert_eq!(a, init_params(&cfg).unwrap());
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.save(d1.path()).unwrap();
        let loaded = PipelineParams::load(d1.path()).unwrap();
        assert_eq!(loaded, a);
        loaded.save(d2.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        for n in names {
            assert_eq!(
                fs::read(d1.path().join(&n)).unwrap(),
                fs::read(d2.path().join(&n)).unwrap()
            );
        }
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        init_params(&cfg).unwrap().save(dir.path()).unwrap();
        pft::write(dir.path().join("gate_text.pft"), &Tensor::zeros(&[3, 3])).unwrap();
        assert!(matches!(
            PipelineParams::load(dir.path()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_is_deterministic_bounded_and_ordered() {
        let cfg = small_config();
        let params = init_params(&cfg).unwrap();
        let (v, t) = inputs(&cfg, 3);
        let a = forward(&v, &t, &params, &cfg).unwrap();
        let b = forward(&v, &t, &params, &cfg).unwrap();
        assert_eq!(a.values.data(), b.values.data());
        assert_eq!(a.values.shape(), &[3, cfg.image.0, cfg.image.1]);
        assert!(a
            .values
            .data()
            .iter()
            .all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    }

    #[test]
    fn forward_is_wrap_shift_equivariant() {
        let cfg = small_config();
        let params = init_params(&cfg).unwrap();
        let (v, t) = inputs(&cfg, 11);
        let base = forward(&v, &t, &params, &cfg).unwrap();
        for cols in [1isize, 3, -2] {
            let shifted = forward(&v.wrap_shift_columns(cols), &t, &params, &cfg).unwrap();
            let expect = wrap_shift(&base.values, cols * PATCH_STRIDE as isize);
            assert!(shifted.values.max_abs_diff(&expect) <= 1e-4, "shift {cols}");
        }
    }

    #[test]
    fn forward_rejects_mismatched_inputs() {
        let cfg = small_config();
        let wrong = random_normal(&[cfg.grid.0 * cfg.grid.1 + 1, cfg.dim], 0);
        let text = random_normal(&[3, cfg.dim], 1);
        assert!(matches!(
            prepare_inputs(wrong, text, &cfg),
            Err(Error::Shape(_))
        ));
    }
}
