//! PSNR, interpolation baselines and the benchmark runner.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{load_image, ImagePlane};
use crate::model::PosteriorEstimate;
use crate::resample::{downsample, upscale, Filter};
use crate::sr::{super_resolve_luma, SrConfig};

/// PSNR in dB, with identical planes kept apart from any finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

/// `10·log10(255² / MSE)` over the full planes.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<Psnr> {
    psnr_shaved(a, b, 0)
}

/// PSNR ignoring a `border`-pixel frame.
pub fn psnr_shaved(a: &ImagePlane, b: &ImagePlane, border: usize) -> Result<Psnr> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "cannot compare {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if 2 * border >= w || 2 * border >= h {
        return Err(Error::InvalidParameter(format!(
            "border {border} leaves nothing of {w}x{h}"
        )));
    }
    let mut sse = 0.0;
    for r in border..h - border {
        for c in border..w - border {
            let d = a.get(r, c) - b.get(r, c);
            sse += d * d;
        }
    }
    if sse == 0.0 {
        return Ok(Psnr::Identical);
    }
    let mse = sse / ((w - 2 * border) * (h - 2 * border)) as f64;
    Ok(Psnr::Db(10.0 * (255.0 * 255.0 / mse).log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Nearest,
    Bilinear,
    Bicubic,
    /// Example-based super-resolution with a trained model.
    Bp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nearest => "nearest",
            Method::Bilinear => "bilinear",
            Method::Bicubic => "bicubic",
            Method::Bp => "bp",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" => Ok(Method::Nearest),
            "bilinear" => Ok(Method::Bilinear),
            "bicubic" => Ok(Method::Bicubic),
            "bp" => Ok(Method::Bp),
            other => Err(Error::InvalidParameter(format!(
                "unknown method '{other}' (expected nearest, bilinear, bicubic or bp)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Interpolation baseline; `method` must be one of the three kernels.
pub fn baseline_upscale(lr: &ImagePlane, ratio: usize, method: Method) -> Result<ImagePlane> {
    if ratio < 2 {
        return Err(Error::InvalidParameter(format!("ratio must be >= 2, got {ratio}")));
    }
    let filter = match method {
        Method::Nearest => Filter::Nearest,
        Method::Bilinear => Filter::Bilinear,
        Method::Bicubic => Filter::Bicubic,
        Method::Bp => {
            return Err(Error::InvalidParameter("bp is not an interpolation baseline".into()));
        }
    };
    upscale(lr, ratio, filter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub image: String,
    pub method: Method,
    /// `None` when the image could not be processed.
    pub psnr: Option<Psnr>,
    pub seconds: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub model_id: String,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub date: u64,
}

impl BenchmarkReport {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.warning.is_some())
    }

    /// Mean PSNR in dB of one method over rows with a finite value.
    pub fn mean_psnr(&self, method: Method) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.psnr.and_then(Psnr::db))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,method,psnr_db,seconds\n");
        for r in &self.rows {
            let p = r.psnr.map(|p| p.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{:.3}\n", r.image, r.method, p, r.seconds));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.image.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "# model {} | config {} | date {}\n{:<width$}  {:<8}  {:>10}  {:>8}\n",
            self.model_id, self.config_hash, self.date, "image", "method", "psnr_db", "seconds"
        );
        for r in &self.rows {
            let p = match (&r.psnr, &r.warning) {
                (Some(p), _) => p.to_string(),
                (None, Some(_)) => "FAILED".to_string(),
                (None, None) => String::new(),
            };
            s.push_str(&format!(
                "{:<width$}  {:<8}  {:>10}  {:>8.3}",
                r.image,
                r.method.name(),
                p,
                r.seconds
            ));
            if let Some(w) = &r.warning {
                s.push_str(&format!("  # {w}"));
            }
            s.push('\n');
        }
        s
    }

    /// Writes the CSV to `path` and the text table next to it with a `.txt` extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)?.write_all(self.to_csv().as_bytes())?;
        std::fs::File::create(path.with_extension("txt"))?.write_all(self.to_table().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkConfig {
    pub sr: SrConfig,
    /// Border pixels excluded from PSNR.
    pub shave: usize,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "bmp", "pgm", "ppm", "pnm", "pbm"];

/// Image files in `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate_image(
    path: &Path,
    model: Option<&PosteriorEstimate>,
    methods: &[Method],
    cfg: &BenchmarkConfig,
) -> Result<Vec<(Method, Psnr, f64)>> {
    let ratio = cfg.sr.sr_ratio;
    let truth = load_image(path)?.crop_to_multiple(ratio)?.y;
    let lr = downsample(&truth, ratio)?;
    methods
        .iter()
        .map(|&m| {
            let start = Instant::now();
            let out = match m {
                Method::Bp => {
                    let est = model.ok_or_else(|| Error::InvalidParameter("method bp needs a model".into()))?;
                    super_resolve_luma(&lr, est, &cfg.sr)?
                }
                _ => baseline_upscale(&lr, ratio, m)?,
            };
            let secs = start.elapsed().as_secs_f64();
            Ok((m, psnr_shaved(&out, &truth, cfg.shave)?, secs))
        })
        .collect()
}

/// Crops each image to a ratio multiple, downsamples it, upscales with every
/// method and scores the Y channel. Images run in parallel; rows follow the
/// sorted directory listing. Unreadable images give warning rows.
pub fn run_benchmark(
    test_dir: impl AsRef<Path>,
    model: Option<&PosteriorEstimate>,
    methods: &[Method],
    cfg: &BenchmarkConfig,
    out_path: Option<&Path>,
) -> Result<BenchmarkReport> {
    cfg.sr.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no methods to evaluate".into()));
    }
    if methods.contains(&Method::Bp) && model.is_none() {
        return Err(Error::InvalidParameter("method bp needs a model".into()));
    }
    let images = list_images(&test_dir)?;
    if images.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no images found in {}",
            test_dir.as_ref().display()
        )));
    }
    let per_image: Vec<Vec<BenchmarkRow>> = images
        .par_iter()
        .map(|path| {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            match evaluate_image(path, model, methods, cfg) {
                Ok(results) => results
                    .into_iter()
                    .map(|(method, p, seconds)| BenchmarkRow {
                        image: name.clone(),
                        method,
                        psnr: Some(p),
                        seconds,
                        warning: None,
                    })
                    .collect(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    methods
                        .iter()
                        .map(|&method| BenchmarkRow {
                            image: name.clone(),
                            method,
                            psnr: None,
                            seconds: 0.0,
                            warning: Some(e.to_string()),
                        })
                        .collect()
                }
            }
        })
        .collect();
    let mut hasher = DefaultHasher::new();
    format!("{cfg:?}{methods:?}").hash(&mut hasher);
    let model_id = model
        .map(|m| {
            let pv = &m.meta.provenance;
            format!("{}-K{}-P{}-seed{}", pv.method, m.k(), m.p(), pv.seed)
        })
        .unwrap_or_else(|| "none".into());
    let report = BenchmarkReport {
        rows: per_image.into_iter().flatten().collect(),
        model_id,
        config_hash: format!("{:016x}", hasher.finish()),
        date: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    if let Some(p) = out_path {
        report.write(p)?;
    }
    Ok(report)
}
