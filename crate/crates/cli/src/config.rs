//! Flat `key = value` run configuration. Every key is optional; command-line
//! flags take precedence over file values, which take precedence over the
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,

    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,

    pub patch_size: Option<usize>,
    pub ratio: Option<usize>,

    pub method: Option<String>,
    pub train_stride: Option<usize>,
    pub max_patches: Option<usize>,
    pub k: Option<usize>,
    pub c0: Option<f64>,
    pub eta0: Option<f64>,
    pub c: Option<f64>,
    pub d: Option<f64>,
    pub e: Option<f64>,
    pub f: Option<f64>,
    pub burn_in: Option<usize>,
    pub collect: Option<usize>,
    pub thin: Option<usize>,
    pub sampler: Option<String>,
    pub init_sweeps: Option<usize>,
    pub max_sweeps: Option<usize>,
    pub tol: Option<f64>,
    pub mini_batch: Option<usize>,
    pub kappa: Option<f64>,
    pub rho0: Option<f64>,
    pub passes: Option<usize>,

    pub stride: Option<usize>,
    pub code_inference: Option<String>,
    pub code_iters: Option<usize>,
    pub code_mode: Option<String>,
    pub postprocess: Option<bool>,
    pub bp_c: Option<f64>,
    pub bp_iters: Option<usize>,
    pub bp_step: Option<f64>,
    pub literal_objective: Option<bool>,

    pub methods: Option<String>,
    pub shave: Option<usize>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
