//! `pglr`: add noise, train a patch prior, denoise and compare grayscale images.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use pglr::gmm::{sample_training_patches, train_em};
use pglr::image::{encode_pfmg, read_image, write_image};
use pglr::noise::add_noise;
use pglr::pipeline::run;
use pglr::preprocess::{load_preprocessed, local_denoise};
use pglr::{Error, GmmModel, Image, PipelineConfig, PreprocessConfig, QualityReport, TrainOptions};

use crate::manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "pglr", version, about = "Guided low-rank patch denoising for grayscale images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Add seeded white Gaussian noise to an image.
    AddNoise(AddNoiseArgs),
    /// Train a Gaussian mixture patch prior on a directory of clean images.
    TrainGmm(TrainArgs),
    /// Denoise an image.
    Denoise(DenoiseArgs),
    /// Compare two images (MSE, PSNR, SSIM).
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct AddNoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write an unclamped f64 raster (PFMG) instead of 8-bit data.
    #[arg(long)]
    float: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    patch_size: usize,
    #[arg(long, default_value_t = 200_000)]
    max_patches: usize,
    #[arg(long, default_value_t = 30)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    model: PathBuf,
    /// Guide image to use instead of the built-in preprocessor.
    #[arg(long)]
    preprocessed: Option<PathBuf>,
    /// Clean image for per-iteration PSNR / SSIM.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.10)]
    alpha: f64,
    #[arg(long, default_value_t = 0.62)]
    beta: f64,
    #[arg(long, default_value_t = 5)]
    max_iter: usize,
    #[arg(long, default_value_t = 2)]
    stride: usize,
    /// Smallest class size; defaults to the patch dimension.
    #[arg(long)]
    q_min: Option<usize>,
    #[arg(long, default_value_t = 360)]
    q_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the guide image fixed instead of blending the noisy image into it.
    #[arg(long)]
    no_xpr_update: bool,
    /// Where to write the run manifest; defaults to `<out>.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Print the manifest to stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    json: bool,
}

/// A failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn mismatch(message: impl Into<String>) -> Self {
        Failure { code: 5, message: message.into() }
    }

    fn with_context(self, context: &str) -> Self {
        Failure { message: format!("{context}: {}", self.message), ..self }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_) => 2,
            Error::Io(_) => 3,
            Error::Format { .. } => 4,
            Error::DimensionMismatch(_) => 5,
            Error::Internal(_) => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn read(path: &Path, what: &str) -> CmdResult<Image> {
    read_image(path).map_err(|e| Failure::from(e).with_context(&format!("{what} {}", path.display())))
}

fn write(path: &Path, image: &Image) -> CmdResult {
    write_image(path, image).map_err(|e| Failure::from(e).with_context(&format!("writing {}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::from(Error::from(e)).with_context(&format!("writing {}", path.display())))
}

fn add_noise_cmd(args: &AddNoiseArgs) -> CmdResult {
    let clean = read(&args.input, "reading")?;
    let noisy = add_noise(&clean, args.sigma, args.seed)?;
    if args.float {
        fs::write(&args.out, encode_pfmg(&noisy))
            .map_err(|e| Failure::from(Error::from(e)).with_context(&format!("writing {}", args.out.display())))?;
    } else {
        write(&args.out, &noisy)?;
    }
    Ok(())
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "pfmg" | "png")
    )
}

fn train_cmd(args: &TrainArgs) -> CmdResult {
    let entries = fs::read_dir(&args.dir)
        .map_err(|e| Failure::from(Error::from(e)).with_context(&format!("reading {}", args.dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in &paths {
        match read_image(p) {
            Ok(img) if img.width() >= args.patch_size && img.height() >= args.patch_size => images.push(img),
            Ok(_) => warn!("skipping {}: smaller than one patch", p.display()),
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Failure {
            code: 2,
            message: format!("no usable training images in {}", args.dir.display()),
        });
    }
    info!("training on {} images", images.len());
    let patches = sample_training_patches(&images, args.patch_size, args.max_patches, args.seed)?;
    let opts = TrainOptions {
        k: args.k,
        max_iters: args.max_iters,
        seed: args.seed,
        ..Default::default()
    };
    let (model, report) = train_em(&patches, &opts)?;
    model
        .save(&args.out)
        .map_err(|e| Failure::from(e).with_context(&format!("writing {}", args.out.display())))?;
    println!(
        "trained {} components on {} patches from {} images; mean log-likelihood {:.6} after {} iterations",
        model.k(),
        patches.rows(),
        images.len(),
        report.final_log_likelihood(),
        report.log_likelihood.len() - 1
    );
    Ok(())
}

fn denoise_cmd(args: &DenoiseArgs) -> CmdResult {
    let mut manifest = RunManifest::new("denoise");
    let noisy = read(&args.input, "reading")?;
    let model = GmmModel::load(&args.model)
        .map_err(|e| Failure::from(e).with_context(&format!("model {}", args.model.display())))?;
    let s = (model.d() as f64).sqrt().round() as usize;
    if s * s != model.d() {
        return Err(Failure::mismatch(format!("model dimension {} is not a square patch size", model.d())));
    }
    let reference = match &args.reference {
        Some(p) => {
            let r = read(p, "reading")?;
            if r.dims() != noisy.dims() {
                return Err(Failure::mismatch(format!(
                    "reference is {}x{} but the noisy image is {}x{}",
                    r.width(),
                    r.height(),
                    noisy.width(),
                    noisy.height()
                )));
            }
            Some(r)
        }
        None => None,
    };
    let cfg = PipelineConfig {
        alpha: args.alpha,
        beta: args.beta,
        max_iter: args.max_iter,
        k_components: model.k(),
        patch_size: s,
        stride: args.stride,
        q_min: args.q_min.unwrap_or(s * s),
        q_max: args.q_max,
        seed: args.seed,
        update_guide: !args.no_xpr_update,
        preprocess: PreprocessConfig { patch_size: s, ..Default::default() },
    };
    cfg.validate()?;

    let guide = match &args.preprocessed {
        Some(p) => load_preprocessed(p, noisy.dims()).map_err(|e| match e {
            Error::InvalidInput(m) => Failure::mismatch(m),
            other => Failure::from(other).with_context(&format!("preprocessed {}", p.display())),
        })?,
        None => manifest.timed("preprocess", || local_denoise(&noisy, args.sigma, &cfg.preprocess))?,
    };
    let (estimate, trace) = manifest.timed("pipeline", || {
        run(&noisy, args.sigma, &model, &cfg, Some(&guide), reference.as_ref())
    })?;
    manifest.timed("write", || write(&args.out, &estimate))?;

    manifest.param("sigma", args.sigma);
    manifest.param("alpha", cfg.alpha);
    manifest.param("beta", cfg.beta);
    manifest.param("max_iter", cfg.max_iter);
    manifest.param("k_components", cfg.k_components);
    manifest.param("patch_size", cfg.patch_size);
    manifest.param("stride", cfg.stride);
    manifest.param("q_min", cfg.q_min);
    manifest.param("q_max", cfg.q_max);
    manifest.param("xpr_update", cfg.update_guide);
    manifest.param("preprocess", &cfg.preprocess);
    manifest.seed = Some(cfg.seed);
    manifest.input("noisy", &args.input);
    manifest.input("model", &args.model);
    if let Some(p) = &args.preprocessed {
        manifest.input("preprocessed", p);
    }
    if let Some(p) = &args.reference {
        manifest.input("reference", p);
        // Score what was written, i.e. after 8-bit quantization for PGM output.
        let written = read(&args.out, "re-reading")?;
        manifest.quality = Some(QualityReport::compare(reference.as_ref().unwrap(), &written)?);
    }
    manifest.output("image", &args.out);
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.json", args.out.display())));
    manifest.output("manifest", &manifest_path);
    manifest.trace = Some(trace);
    let json = manifest.to_json();
    write_text(&manifest_path, &json)?;

    if args.json {
        println!("{json}");
    } else if reference.is_some() {
        let trace = manifest.trace.as_ref().unwrap();
        println!("iter  sigma     PSNR      SSIM");
        for (t, rec) in trace.iterations.iter().enumerate() {
            println!(
                "{:>4}  {:>7.3}  {:>7.4}  {:>7.4}",
                t + 1,
                rec.sigma,
                rec.psnr.unwrap_or(f64::NAN),
                rec.ssim.unwrap_or(f64::NAN)
            );
        }
        let q = manifest.quality.unwrap();
        println!("output: PSNR {:.4} dB, SSIM {:.4}", q.psnr, q.ssim);
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> CmdResult {
    let a = read(&args.a, "reading")?;
    let b = read(&args.b, "reading")?;
    let report = QualityReport::compare(&a, &b)?;
    if args.json {
        let mut manifest = RunManifest::new("eval");
        manifest.input("a", &args.a);
        manifest.input("b", &args.b);
        manifest.quality = Some(report);
        println!("{}", manifest.to_json());
    } else {
        println!("MSE  {:.4}", report.mse);
        println!("PSNR {:.4}", report.psnr);
        println!("SSIM {:.4}", report.ssim);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::AddNoise(a) => add_noise_cmd(a),
        Command::TrainGmm(a) => train_cmd(a),
        Command::Denoise(a) => denoise_cmd(a),
        Command::Eval(a) => eval_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
