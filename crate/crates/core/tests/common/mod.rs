#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use panoafford::numerics::pft;
use panoafford::pipeline::{
    forward, init_params, prepare_inputs, random_normal, PipelineConfig, PipelineParams,
};
use panoafford::Tensor;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn panoafford(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_panoafford"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
}

pub struct Golden {
    pub config: PathBuf,
    pub features: PathBuf,
    pub text: PathBuf,
    pub params: PathBuf,
    pub output: PathBuf,
}

pub fn golden() -> Golden {
    let d = data_dir();
    Golden {
        config: d.join("golden_config.json"),
        features: d.join("golden_features.pft"),
        text: d.join("golden_text.pft"),
        params: d.join("golden_params"),
        output: d.join("golden_forward.pft"),
    }
}

/// Regenerates the frozen golden inputs and output. Only run deliberately.
pub fn bless_golden() {
    let g = golden();
    let cfg = PipelineConfig::read(&g.config).unwrap();
    let features = random_normal(&[cfg.grid.0 * cfg.grid.1, cfg.dim], 101);
    let text = random_normal(&[cfg.classes.len(), cfg.dim], 202);
    pft::write(&g.features, &features).unwrap();
    pft::write(&g.text, &text).unwrap();
    let params = init_params(&cfg).unwrap();
    params.save(&g.params).unwrap();
    let params = PipelineParams::load(&g.params).unwrap();
    let (v, t) = prepare_inputs(features, text, &cfg).unwrap();
    pft::write(&g.output, &forward(&v, &t, &params, &cfg).unwrap().values).unwrap();
}

pub fn vocab_file(dir: &Path, names: &[&str]) -> PathBuf {
    let f = dir.join("classes.txt");
    std::fs::write(&f, names.join("\n") + "\n").unwrap();
    f
}

pub fn write_pft(path: &Path, t: &Tensor) -> PathBuf {
    pft::write(path, t).unwrap();
    path.to_path_buf()
}
