mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cbpfa::eval::{baseline_upscale, list_images, psnr, run_benchmark, BenchmarkConfig, Method};
use cbpfa::gibbs::{run_gibbs, GibbsConfig, LocalScheme};
use cbpfa::image::{load_image, save_image, YCbCrImage};
use cbpfa::model::{ModelMetadata, Provenance};
use cbpfa::online::{run_online_vb, LearningSchedule, OnlineOptions};
use cbpfa::patches::build_coupled_patches;
use cbpfa::resample::downsample;
use cbpfa::rng::{substream, GLOBAL_STREAM};
use cbpfa::sr::{super_resolve, CodeInference, CodeMode, SrConfig};
use cbpfa::vb::{run_batch_vb, VbOptions};
use cbpfa::{load_model, save_model, Hyperparameters, PatchMatrix, PosteriorEstimate};

use config::FileConfig;

/// Coupled-dictionary beta-process factor analysis for single-image
/// super-resolution.
///
/// Every option can also be set in a flat `key = value` file passed with
/// --config (keys are the long flag names with `-` replaced by `_`).
/// Flags win over file values, which win over the defaults shown.
#[derive(Parser, Debug)]
#[command(name = "cbpfa", version, about)]
struct Cli {
    /// Configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; equal seeds give bit-identical results [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads [default: available cores]
    #[arg(long, global = true, env = "CBPFA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a coupled dictionary from a directory of high-resolution images
    Train(TrainArgs),
    /// Super-resolve one image with a trained model
    Sr(SrArgs),
    /// Crop an image to a multiple of the ratio and downsample every channel
    Downscale(DownscaleArgs),
    /// Benchmark interpolation baselines and a model on a directory of images
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of training images
    #[arg(long)]
    input: Option<PathBuf>,
    /// Model file to write [default: model.cbpd]
    #[arg(long)]
    output: Option<PathBuf>,
    /// Trace CSV to write [default: <output>.trace.csv]
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Inference engine: gibbs, vb or online [default: online]
    #[arg(long)]
    method: Option<String>,
    /// Patch side length in pixels [default: 8]
    #[arg(long)]
    patch_size: Option<usize>,
    /// Magnification ratio [default: 2]
    #[arg(long)]
    ratio: Option<usize>,
    /// Patch extraction stride for training [default: 1]
    #[arg(long)]
    train_stride: Option<usize>,
    /// Random subset size when more patches are extracted [default: 100000]
    #[arg(long)]
    max_patches: Option<usize>,
    /// Truncation level (dictionary size) [default: 512]
    #[arg(long)]
    k: Option<usize>,
    /// Beta-process concentration [default: 2]
    #[arg(long)]
    c0: Option<f64>,
    /// Beta-process mean [default: 0.5]
    #[arg(long)]
    eta0: Option<f64>,
    /// Noise-precision gamma prior shape [default: 1e-6]
    #[arg(long)]
    c: Option<f64>,
    /// Noise-precision gamma prior rate [default: 1e-6]
    #[arg(long)]
    d: Option<f64>,
    /// Weight-precision gamma prior shape [default: 1e-6]
    #[arg(long)]
    e: Option<f64>,
    /// Weight-precision gamma prior rate [default: 1e-6]
    #[arg(long)]
    f: Option<f64>,
    /// Gibbs sweeps discarded [default: 1500]
    #[arg(long)]
    burn_in: Option<usize>,
    /// Gibbs samples averaged [default: 1500]
    #[arg(long)]
    collect: Option<usize>,
    /// Gibbs sweeps between collected samples [default: 1]
    #[arg(long)]
    thin: Option<usize>,
    /// Gibbs code update: blocked or single-site [default: blocked]
    #[arg(long)]
    sampler: Option<String>,
    /// Gibbs sweeps initialising vb and online [default: 5]
    #[arg(long)]
    init_sweeps: Option<usize>,
    /// Batch VB sweep limit [default: 200]
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// Batch VB relative ELBO tolerance [default: 1e-5]
    #[arg(long)]
    tol: Option<f64>,
    /// Online VB patches per step [default: 5000]
    #[arg(long)]
    mini_batch: Option<usize>,
    /// Online VB forgetting rate in (0.5, 1] [default: 0.501]
    #[arg(long)]
    kappa: Option<f64>,
    /// Online VB delay [default: 3]
    #[arg(long)]
    rho0: Option<f64>,
    /// Online VB passes over the patches [default: 1]
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct SrFlags {
    /// Test-time patch stride [default: 2]
    #[arg(long)]
    stride: Option<usize>,
    /// Code inference: vb or gibbs [default: vb]
    #[arg(long)]
    code_inference: Option<String>,
    /// Local passes (vb) or averaged sweeps (gibbs) [default: 10]
    #[arg(long)]
    code_iters: Option<usize>,
    /// Point code: hard or soft [default: hard]
    #[arg(long)]
    code_mode: Option<String>,
    /// Run back-projection after synthesis [default: true]
    #[arg(long)]
    postprocess: Option<bool>,
    /// Back-projection fidelity weight [default: 1]
    #[arg(long)]
    bp_c: Option<f64>,
    /// Back-projection iterations [default: 20]
    #[arg(long)]
    bp_iters: Option<usize>,
    /// Back-projection initial step [default: 0.1]
    #[arg(long)]
    bp_step: Option<f64>,
    /// Fidelity on downsampled images instead of the estimate [default: false]
    #[arg(long)]
    literal_objective: Option<bool>,
}

#[derive(Args, Debug)]
struct SrArgs {
    /// Trained model
    #[arg(long)]
    model: Option<PathBuf>,
    /// Low-resolution input image
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output image [default: <input>_sr.png]
    #[arg(long)]
    output: Option<PathBuf>,
    /// High-resolution reference; prints PSNR against bicubic
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[command(flatten)]
    sr: SrFlags,
}

#[derive(Args, Debug)]
struct DownscaleArgs {
    /// Input image
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output image
    #[arg(long)]
    output: Option<PathBuf>,
    /// Reduction ratio [default: 2]
    #[arg(long)]
    ratio: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of high-resolution test images
    #[arg(long)]
    input: Option<PathBuf>,
    /// Trained model (needed for method bp)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report CSV; a text table is written next to it [default: report.csv]
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated methods [default: nearest,bilinear,bicubic, plus bp with a model]
    #[arg(long)]
    methods: Option<String>,
    /// Magnification ratio [default: the model's, else 2]
    #[arg(long)]
    ratio: Option<usize>,
    /// Border pixels left out of PSNR [default: 0]
    #[arg(long)]
    shave: Option<usize>,
    #[command(flatten)]
    sr: SrFlags,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file).ok_or_else(|| {
        anyhow!(
            "--{name} is required (or set {} in the config file)",
            name.replace('-', "_")
        )
    })
}

fn parse_method(s: &str) -> Result<String> {
    match s {
        "gibbs" | "vb" | "online" => Ok(s.to_string()),
        other => bail!("unknown training method {other:?} (expected gibbs, vb or online)"),
    }
}

fn parse_code_inference(s: &str) -> Result<CodeInference> {
    match s {
        "vb" => Ok(CodeInference::Vb),
        "gibbs" => Ok(CodeInference::Gibbs),
        other => bail!("unknown code inference {other:?} (expected vb or gibbs)"),
    }
}

fn parse_code_mode(s: &str) -> Result<CodeMode> {
    match s {
        "hard" => Ok(CodeMode::Hard),
        "soft" => Ok(CodeMode::Soft),
        other => bail!("unknown code mode {other:?} (expected hard or soft)"),
    }
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| m.parse::<Method>().map_err(|e| anyhow!("{e}")))
        .collect()
}

fn sr_config(
    flags: &SrFlags,
    file: &FileConfig,
    est: Option<&PosteriorEstimate>,
    ratio: usize,
    seed: u64,
) -> Result<SrConfig> {
    let d = SrConfig::default();
    let patch_size = est.map(|m| m.meta.patch_size).unwrap_or(d.patch_size);
    let cfg = SrConfig {
        sr_ratio: ratio,
        patch_size,
        stride: pick(flags.stride, file.stride, d.stride),
        code_inference: match flags.code_inference.as_deref().or(file.code_inference.as_deref()) {
            Some(s) => parse_code_inference(s)?,
            None => d.code_inference,
        },
        code_iters: pick(flags.code_iters, file.code_iters, d.code_iters),
        code_mode: match flags.code_mode.as_deref().or(file.code_mode.as_deref()) {
            Some(s) => parse_code_mode(s)?,
            None => d.code_mode,
        },
        postprocess: pick(flags.postprocess, file.postprocess, d.postprocess),
        postprocess_c: pick(flags.bp_c, file.bp_c, d.postprocess_c),
        postprocess_iters: pick(flags.bp_iters, file.bp_iters, d.postprocess_iters),
        postprocess_step: pick(flags.bp_step, file.bp_step, d.postprocess_step),
        literal_objective: pick(flags.literal_objective, file.literal_objective, d.literal_objective),
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_estimate(path: &Path) -> Result<PosteriorEstimate> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn cmd_train(a: TrainArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let input = required(a.input, file.input.clone(), "input")?;
    let output = pick(a.output, file.output.clone(), PathBuf::from("model.cbpd"));
    let trace = a
        .trace
        .or(file.trace.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{}.trace.csv", output.display())));
    let method = parse_method(&pick(a.method, file.method.clone(), "online".into()))?;
    let patch_size = pick(a.patch_size, file.patch_size, 8);
    let ratio = pick(a.ratio, file.ratio, 2);
    let stride = pick(a.train_stride, file.train_stride, 1);
    let max_patches = pick(a.max_patches, file.max_patches, 100_000);
    let d = Hyperparameters::default();
    let h = Hyperparameters {
        c0: pick(a.c0, file.c0, d.c0),
        eta0: pick(a.eta0, file.eta0, d.eta0),
        c: pick(a.c, file.c, d.c),
        d: pick(a.d, file.d, d.d),
        e: pick(a.e, file.e, d.e),
        f: pick(a.f, file.f, d.f),
        k: pick(a.k, file.k, d.k),
    };
    h.validate()?;
    if ratio < 2 {
        bail!("ratio must be >= 2, got {ratio}");
    }
    if patch_size == 0 || stride == 0 || max_patches == 0 {
        bail!("patch size, train stride and max patches must be positive");
    }
    let scheme: LocalScheme = match a.sampler.or(file.sampler.clone()) {
        Some(s) => s.parse()?,
        None => LocalScheme::default(),
    };
    let gibbs_cfg = GibbsConfig {
        burn_in: pick(a.burn_in, file.burn_in, 1500),
        collect: pick(a.collect, file.collect, 1500),
        thin: pick(a.thin, file.thin, 1),
        seed,
        scheme,
    };
    gibbs_cfg.validate()?;
    let vb_opts = VbOptions {
        tol: pick(a.tol, file.tol, 1e-5),
        max_sweeps: pick(a.max_sweeps, file.max_sweeps, 200),
        init_sweeps: pick(a.init_sweeps, file.init_sweeps, 5),
        seed,
        ..VbOptions::default()
    };
    if !(vb_opts.tol >= 0.0) || vb_opts.init_sweeps == 0 {
        bail!("tol must be >= 0 and init sweeps >= 1");
    }
    let mini_batch = pick(a.mini_batch, file.mini_batch, 5000);
    let kappa = pick(a.kappa, file.kappa, 0.501);
    let rho0 = pick(a.rho0, file.rho0, 3.0);
    LearningSchedule::new(rho0, kappa, mini_batch, 1)?;
    let online_opts = OnlineOptions {
        init_sweeps: vb_opts.init_sweeps,
        passes: pick(a.passes, file.passes, 1),
        seed,
        ..OnlineOptions::default()
    };

    let images = list_images(&input).with_context(|| format!("listing {}", input.display()))?;
    if images.is_empty() {
        bail!("no images found in {}", input.display());
    }
    let mut patches: Option<PatchMatrix> = None;
    for path in &images {
        let y = load_image(path)
            .with_context(|| format!("reading {}", path.display()))?
            .crop_to_multiple(ratio)?
            .y;
        let x = build_coupled_patches(&y, ratio, patch_size, stride)
            .with_context(|| format!("patches from {}", path.display()))?;
        match patches.as_mut() {
            Some(all) => all.extend(&x)?,
            None => patches = Some(x),
        }
    }
    let mut patches = patches.expect("at least one image");
    if patches.count() > max_patches {
        patches = patches.subsample(max_patches, &mut substream(seed, 0, GLOBAL_STREAM));
    }
    log::info!("{} coupled patches from {} images", patches.count(), images.len());

    let (global, iterations) = match method.as_str() {
        "gibbs" => {
            let run = run_gibbs(&patches, &h, &gibbs_cfg)?;
            run.stats.write_csv(&trace)?;
            (run.estimate, run.stats.len())
        }
        "vb" => {
            let run = run_batch_vb(&patches, &h, &vb_opts)?;
            if !run.converged {
                log::warn!("batch VB stopped at the sweep limit before reaching tol");
            }
            run.trace.write_csv(&trace)?;
            (run.global, run.trace.elbo.len() - 1)
        }
        _ => {
            let sched = LearningSchedule::new(rho0, kappa, mini_batch, patches.count())?;
            let run = run_online_vb(&patches, &h, &sched, &online_opts, None)?;
            run.trace.write_csv(&trace)?;
            (run.global, run.trace.t.len())
        }
    };
    let meta = ModelMetadata {
        patch_size,
        sr_ratio: ratio,
        hyperparameters: h,
        provenance: Provenance {
            method,
            seed,
            n_patches: patches.count(),
            iterations,
        },
    };
    let est = PosteriorEstimate::new(global, meta)?;
    save_model(&est, &output).with_context(|| format!("writing {}", output.display()))?;
    log::info!("model written to {}, trace to {}", output.display(), trace.display());
    Ok(())
}

fn cmd_sr(a: SrArgs, file: &FileConfig, seed: u64) -> Result<()> {
    let model = required(a.model, file.model.clone(), "model")?;
    let input = required(a.input, file.input.clone(), "input")?;
    let output = a.output.or(file.output.clone()).unwrap_or_else(|| {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        input.with_file_name(format!("{stem}_sr.png"))
    });
    let ground_truth = a.ground_truth.or(file.ground_truth.clone());
    let est = load_estimate(&model)?;
    let cfg = sr_config(&a.sr, file, Some(&est), est.meta.sr_ratio, seed)?;
    let lr = load_image(&input).with_context(|| format!("reading {}", input.display()))?;
    let hr = super_resolve(&lr, &est, &cfg)?;
    save_image(&hr, &output).with_context(|| format!("writing {}", output.display()))?;
    if let Some(gt_path) = ground_truth {
        let gt = load_image(&gt_path)
            .with_context(|| format!("reading {}", gt_path.display()))?
            .crop_to_multiple(cfg.sr_ratio)?;
        if gt.width() != hr.width() || gt.height() != hr.height() {
            bail!(
                "ground truth is {}x{} after cropping, output is {}x{}",
                gt.width(),
                gt.height(),
                hr.width(),
                hr.height()
            );
        }
        let bicubic = baseline_upscale(&lr.y, cfg.sr_ratio, Method::Bicubic)?;
        let p_sr = psnr(&hr.y, &gt.y)?;
        let p_bic = psnr(&bicubic, &gt.y)?;
        println!("psnr sr {p_sr} bicubic {p_bic}");
        if let (Some(s), Some(b)) = (p_sr.db(), p_bic.db()) {
            println!("gain over bicubic {:+.3} dB", s - b);
        }
    }
    Ok(())
}

fn cmd_downscale(a: DownscaleArgs, file: &FileConfig) -> Result<()> {
    let input = required(a.input, file.input.clone(), "input")?;
    let output = required(a.output, file.output.clone(), "output")?;
    let ratio = pick(a.ratio, file.ratio, 2);
    if ratio < 2 {
        bail!("ratio must be >= 2, got {ratio}");
    }
    let img = load_image(&input)
        .with_context(|| format!("reading {}", input.display()))?
        .crop_to_multiple(ratio)?;
    let small = YCbCrImage::new(
        downsample(&img.y, ratio)?,
        downsample(&img.cb, ratio)?,
        downsample(&img.cr, ratio)?,
    )?;
    save_image(&small, &output).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, file: &FileConfig, seed: u64) -> Result<bool> {
    let input = required(a.input, file.input.clone(), "input")?;
    let output = pick(a.output, file.output.clone(), PathBuf::from("report.csv"));
    let est = match a.model.or(file.model.clone()) {
        Some(p) => Some(load_estimate(&p)?),
        None => None,
    };
    let methods = match a.methods.or(file.methods.clone()) {
        Some(s) => parse_methods(&s)?,
        None if est.is_some() => vec![Method::Nearest, Method::Bilinear, Method::Bicubic, Method::Bp],
        None => vec![Method::Nearest, Method::Bilinear, Method::Bicubic],
    };
    let ratio = a
        .ratio
        .or(file.ratio)
        .unwrap_or_else(|| est.as_ref().map(|m| m.meta.sr_ratio).unwrap_or(2));
    let cfg = BenchmarkConfig {
        sr: sr_config(&a.sr, file, est.as_ref(), ratio, seed)?,
        shave: pick(a.shave, file.shave, 0),
    };
    let report = run_benchmark(&input, est.as_ref(), &methods, &cfg, Some(&output))?;
    print!("{}", report.to_table());
    Ok(!report.failed())
}

fn run(cli: Cli) -> Result<bool> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = pick(cli.seed, file.seed, 0);
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            bail!("threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a, &file, seed).map(|_| true),
        Command::Sr(a) => cmd_sr(a, &file, seed).map(|_| true),
        Command::Downscale(a) => cmd_downscale(a, &file).map(|_| true),
        Command::Eval(a) => cmd_eval(a, &file, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some images failed; see the report");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
