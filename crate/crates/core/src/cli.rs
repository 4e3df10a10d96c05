//! `panoafford` command-line interface.
//!
//! Exit codes: 0 on success, 1 for contract violations (bad arguments, shape
//! mismatches, unknown classes, incomplete evaluation), 2 for I/O and
//! malformed input files.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::dasm::VisualTokens;
use crate::erp::{
    augment, blur_supervision, keypoints_to_heatmap, AugmentParams, AugmentRanges,
    KeypointAnnotation, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, ground_truth, load_annotations};
use crate::numerics::{pft, Tensor};
use crate::objectives::{kl_loss, toy_optimize, two_blob_target, write_trace_csv, LossWeights};
use crate::osdh::{densify_from_initial, AffordanceMap, OsdhParams};
use crate::pipeline::{forward, init_params, prepare_inputs, PipelineConfig, PipelineParams};

#[derive(Debug, Parser)]
#[command(
    name = "panoafford",
    version,
    about = "Panoramic affordance heatmaps from patch features and class embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render keypoint annotations into blurred per-class heatmaps (C×H×W).
    GenSupervision(GenSupervisionArgs),
    /// Apply a seeded panoramic augmentation to an image and its maps.
    Augment(AugmentArgs),
    /// Run the full model on L×D features and C×D class embeddings.
    Forward(ForwardArgs),
    /// Score predicted heatmaps against keypoint annotations.
    Eval(EvalArgs),
    /// Fit free logits to a heatmap with the BCE + KL objective.
    DemoTrain(DemoTrainArgs),
    /// Show affinity, seeds and the densified map for given activations.
    InspectAffinity(InspectAffinityArgs),
}

#[derive(Debug, Args)]
pub struct GenSupervisionArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Vocabulary file, one class per line.
    #[arg(long)]
    pub classes: PathBuf,
    /// Gaussian sigma in pixels.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one PGM per class into this directory.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// C×H×W (or H×W) image tensor.
    #[arg(long)]
    pub image: PathBuf,
    /// C×H×W (or H×W) maps sharing the image's height and width.
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes `<prefix>image.pft`, `<prefix>maps.pft` and `<prefix>params.json`.
    #[arg(long)]
    pub out_prefix: String,
    /// Use identity parameters instead of sampling.
    #[arg(long)]
    pub identity: bool,
    #[arg(long, default_value_t = 3.0)]
    pub max_rotation_deg: f64,
    #[arg(long, default_value_t = 0.05)]
    pub max_scale_delta: f64,
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// L×D patch features.
    #[arg(long)]
    pub features: PathBuf,
    /// C×D class embeddings in vocabulary order.
    #[arg(long)]
    pub text: PathBuf,
    /// Parameter directory; initialized from the config seed when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Store the parameters used into this directory.
    #[arg(long)]
    pub save_params: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<image_id>.pft` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Annotation JSON file or directory of JSON files.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long)]
    pub sigma: f64,
    /// JSON report path; the CSV goes next to it.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Write ground-truth PGMs of every evaluated (image, class) here.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoTrainArgs {
    /// H×W target heatmap; the built-in 32×64 two-blob target when omitted.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// `λ1,λ2,λ3`
    #[arg(long, default_value = "1,1,0")]
    pub weights: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV loss trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Final logits.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Final normalized prediction.
    #[arg(long)]
    pub prediction: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectAffinityArgs {
    /// L×D token features.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub topk: usize,
    /// C×L initial activations.
    #[arg(long)]
    pub class_activations: PathBuf,
    /// Refined C×L map.
    #[arg(long)]
    pub out: PathBuf,
    /// L×L affinity matrix.
    #[arg(long)]
    pub affinity_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Keep negative propagation.
    #[arg(long)]
    pub no_clamp: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenSupervision(a) => gen_supervision(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Forward(a) => forward_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::DemoTrain(a) => demo_train(a),
        Command::InspectAffinity(a) => inspect_affinity(a),
    }
}

fn write_pgms(dir: &Path, maps: &Tensor, names: &[String], suffix: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (c, h, w) = maps.dims3()?;
    for (ch, name) in names.iter().enumerate().take(c) {
        pft::write_pgm(dir.join(format!("{name}{suffix}.pgm")), maps.row(ch), h, w)?;
    }
    Ok(())
}

fn gen_supervision(a: GenSupervisionArgs) -> Result<i32> {
    let ann = KeypointAnnotation::read(&a.annotations)?;
    let classes = Vocabulary::read(&a.classes)?;
    if ann.annotations.iter().all(|e| e.points.is_empty()) {
        warn!(
            "{}: no keypoints, writing an all-zero heatmap",
            ann.image_id
        );
    }
    let maps = blur_supervision(&keypoints_to_heatmap(&ann, &classes, a.sigma)?, a.sigma)?;
    pft::write(&a.out, &maps)?;
    if let Some(dir) = &a.pgm {
        write_pgms(dir, &maps, classes.names(), "")?;
    }
    info!("wrote {:?} to {}", maps.shape(), a.out.display());
    Ok(0)
}

/// Lifts an H×W tensor to 1×H×W; returns the original shape for writing back.
fn as_planes(t: Tensor) -> Result<(Tensor, Vec<usize>)> {
    let shape = t.shape().to_vec();
    match shape.len() {
        2 => Ok((t.reshape(&[1, shape[0], shape[1]])?, shape)),
        3 => Ok((t, shape)),
        n => Err(Error::shape(format!(
            "expected an H×W or C×H×W tensor, got {n} dims"
        ))),
    }
}

fn augment_cmd(a: AugmentArgs) -> Result<i32> {
    let (image, image_shape) = as_planes(pft::read(&a.image)?)?;
    let (maps, maps_shape) = as_planes(pft::read(&a.maps)?)?;
    let width = image.shape()[2];
    let params = if a.identity {
        AugmentParams::identity()
    } else {
        let ranges = AugmentRanges {
            max_rotation_deg: a.max_rotation_deg,
            max_scale_delta: a.max_scale_delta,
            flip: !a.no_flip,
        };
        ranges.validate()?;
        AugmentParams::sample(a.seed, width, &ranges)
    };
    let (img, mp) = augment(&image, &maps, &params)?;
    let prefix = &a.out_prefix;
    pft::write(format!("{prefix}image.pft"), &img.reshape(&image_shape)?)?;
    pft::write(format!("{prefix}maps.pft"), &mp.reshape(&maps_shape)?)?;
    fs::write(
        format!("{prefix}params.json"),
        serde_json::to_string_pretty(&params)? + "\n",
    )?;
    Ok(0)
}

fn forward_cmd(a: ForwardArgs) -> Result<i32> {
    let cfg = PipelineConfig::read(&a.config)?;
    let params = match &a.params {
        Some(dir) => PipelineParams::load(dir)?,
        None => init_params(&cfg)?,
    };
    if params.dasm.dim() != cfg.dim {
        return Err(Error::shape(format!(
            "parameters have dim {}, config dim {}",
            params.dasm.dim(),
            cfg.dim
        )));
    }
    if let Some(dir) = &a.save_params {
        params.save(dir)?;
    }
    let (v, t) = prepare_inputs(pft::read(&a.features)?, pft::read(&a.text)?, &cfg)?;
    let out = forward(&v, &t, &params, &cfg)?;
    pft::write(&a.out, &out.values)?;
    if let Some(dir) = &a.pgm {
        write_pgms(dir, &out.values, cfg.classes.names(), "")?;
    }
    Ok(0)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let anns = load_annotations(&a.annotations)?;
    let classes = Vocabulary::read(&a.classes)?;
    let report = evaluate_dataset(&a.pred, &anns, &classes, a.sigma, a.jobs)?;
    report.write(&a.report)?;
    if let Some(dir) = &a.pgm {
        for ann in anns
            .iter()
            .filter(|x| report.per_image.iter().any(|r| r.image_id == x.image_id))
        {
            let gt = ground_truth(ann, &classes, a.sigma)?;
            let names: Vec<String> = classes
                .names()
                .iter()
                .map(|c| format!("{}_{c}", ann.image_id))
                .collect();
            write_pgms(dir, &gt, &names, "_gt")?;
        }
    }
    for s in &report.skipped {
        warn!("skipped {}: {}", s.image_id, s.reason);
    }
    let o = &report.overall;
    println!(
        "records={} kld={} sim={} nss={}",
        o.count, o.kld, o.sim, o.nss
    );
    if report.is_complete() {
        Ok(0)
    } else {
        eprintln!(
            "error: evaluation incomplete ({} skipped, {} records)",
            report.skipped.len(),
            o.count
        );
        Ok(1)
    }
}

fn demo_train(a: DemoTrainArgs) -> Result<i32> {
    let w = LossWeights::parse_triplet(&a.weights)?;
    let gt = match &a.gt {
        Some(p) => {
            let t = pft::read(p)?;
            match t.shape() {
                [_, _] => t,
                &[1, h, w] => t.reshape(&[h, w])?,
                s => return Err(Error::shape(format!("target must be H×W, got {s:?}"))),
            }
        }
        None => two_blob_target(32, 64),
    };
    let run = toy_optimize(&gt, a.steps, a.lr, &w, a.seed)?;
    if let Some(p) = &a.trace {
        write_trace_csv(&run.trace, fs::File::create(p)?)?;
    }
    if let Some(p) = &a.out {
        pft::write(p, &run.logits)?;
    }
    let pred = run.prediction(w.eps);
    if let Some(p) = &a.prediction {
        pft::write(p, &pred)?;
    }
    let last = run.trace.last().expect("trace has the initial row");
    let kl = kl_loss(
        &pred,
        &crate::erp::normalize_to_distribution(&gt, w.eps)?,
        w.eps,
    )?;
    println!(
        "steps={} bce={} kl={} total={}",
        a.steps, last.bce, kl, last.total
    );
    Ok(0)
}

fn inspect_affinity(a: InspectAffinityArgs) -> Result<i32> {
    let features = pft::read(&a.features)?;
    let (l, _) = features.dims2()?;
    let v = VisualTokens::new(features, (1, l))?;
    let initial = AffordanceMap::tokens(pft::read(&a.class_activations)?, (1, l))?;
    let p = OsdhParams {
        k: a.topk,
        temperature: a.temperature,
        alpha: a.alpha,
        clamp_negative: !a.no_clamp,
        query_refinement: false,
    };
    let trace = densify_from_initial(&v, initial, &p)?;
    pft::write(&a.out, &trace.refined.values)?;
    if let Some(path) = &a.affinity_out {
        pft::write(path, &trace.affinity.s)?;
    }
    println!("{}", serde_json::json!({ "seeds": trace.seeds }));
    Ok(0)
}
