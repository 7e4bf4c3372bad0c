//! `flcnn` command line: training, denoising, evaluation, architecture
//! inspection, grid enumeration, noise injection and gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
//! stderr; machine-readable output (CSV, paths, `key=value` lines) to stdout.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use flcnn::eval::{evaluate_dataset_with, write_report_csv, EvalError};
use flcnn::imageio::{from_unit, read_image, to_unit, write_pgm, ImageError};
use flcnn::model::{
    build_flashlight, enumerate_architectures, save_checkpoint, AnyModel, ArchConfig,
    CheckpointError, ModelError, ModelGraph, Op,
};
use flcnn::tensor::{DType, Scalar};
use flcnn::train::{
    add_awgn, gradient_check, train_with_observer, TrainConfig, TrainError, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPSILON,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gradient check failed: max relative error {error:e} exceeds {limit:e}")]
    GradCheckFailed { error: f64, limit: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "flcnn", version, about = "FlashLight CNN grayscale denoiser")]
pub struct CliConfig {
    /// Seed for weights, patches and noise.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Element type for new models and gradient checks.
    #[arg(long, global = true, default_value = "f32")]
    pub dtype: DType,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model for one noise level.
    Train(TrainArgs),
    /// Denoise one image with a trained model.
    Denoise(DenoiseArgs),
    /// Evaluate a model on a directory of images at a fixed noise level.
    Eval(EvalArgs),
    /// Print the layer table, parameter count and receptive field.
    Info(InfoArgs),
    /// Parameter counts over a grid of architectures, as CSV.
    Search(SearchArgs),
    /// Corrupt an image with seeded Gaussian noise (clipped, rounded).
    AddNoise(AddNoiseArgs),
    /// Compare backward gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of validation images (omit to disable validation).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value = "5,4,6")]
    pub arch: ArchConfig,
    #[arg(long, default_value_t = 55)]
    pub epochs: usize,
    /// Batches per epoch.
    #[arg(long, default_value_t = 4096)]
    pub epoch_length: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 64)]
    pub patch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// First epoch trained at the reduced learning rate.
    #[arg(long, default_value_t = 30)]
    pub lr_drop: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_after: f64,
    /// Random dihedral flips/rotations of each patch.
    #[arg(long)]
    pub augment: bool,
    /// Leave the wall_seconds column of log.csv empty.
    #[arg(long)]
    pub no_wall_clock: bool,
    /// Output directory for checkpoints and log.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of clean images.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dataset label for the report (default: directory name).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub sigma: f64,
    /// Report CSV path (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write each denoised image as PGM into this directory.
    #[arg(long)]
    pub save_images: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "source")]
pub struct InfoSource {
    #[arg(long)]
    pub arch: Option<ArchConfig>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[command(flatten)]
    pub source: InfoSource,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Comma-separated values of l.
    #[arg(long, value_delimiter = ',', required = true)]
    pub l: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub m: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub n: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AddNoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "1,1,1")]
    pub arch: ArchConfig,
    /// Input height and width.
    #[arg(long, default_value = "10,10", value_delimiter = ',')]
    pub size: Vec<usize>,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Exit with a runtime error when the max relative error exceeds this.
    #[arg(long)]
    pub max_error: Option<f64>,
}

/// Parse `args` (including the program name) and execute. Returns the exit
/// code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cfg = match CliConfig::try_parse_from(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cfg: CliConfig) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(&cfg))
}

fn dispatch(cfg: &CliConfig) -> Result<(), CliError> {
    match &cfg.command {
        Command::Train(a) => match cfg.dtype {
            DType::F32 => cmd_train::<f32>(cfg, a),
            DType::F64 => cmd_train::<f64>(cfg, a),
        },
        Command::Denoise(a) => match AnyModel::load(&a.model)? {
            AnyModel::F32(g) => cmd_denoise(&g, a),
            AnyModel::F64(g) => cmd_denoise(&g, a),
        },
        Command::Eval(a) => match AnyModel::load(&a.model)? {
            AnyModel::F32(g) => cmd_eval(cfg, &g, a),
            AnyModel::F64(g) => cmd_eval(cfg, &g, a),
        },
        Command::Info(a) => cmd_info(a),
        Command::Search(a) => cmd_search(a),
        Command::AddNoise(a) => cmd_add_noise(cfg, a),
        Command::Gradcheck(a) => cmd_gradcheck(cfg, a),
    }
}

fn load_dir(dir: &Path) -> Result<Vec<flcnn::imageio::GrayImage>, CliError> {
    flcnn::imageio::list_images(dir)?
        .iter()
        .map(|p| read_image(p).map_err(CliError::from))
        .collect()
}

fn cmd_train<T: Scalar>(cfg: &CliConfig, a: &TrainArgs) -> Result<(), CliError> {
    let tc = TrainConfig {
        arch: a.arch,
        sigma: a.sigma,
        epochs: a.epochs,
        epoch_length: a.epoch_length,
        batch_size: a.batch_size,
        patch_size: a.patch,
        lr_initial: a.lr,
        lr_drop_epoch: a.lr_drop,
        lr_after: a.lr_after,
        seed: cfg.seed,
        augment: a.augment,
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = load_dir(&a.data)?;
    let val = match &a.val {
        Some(dir) => load_dir(dir)?,
        None => Vec::new(),
    };
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    eprintln!(
        "training flashlight({}) sigma={} dtype={} steps={} adam(beta1={ADAM_BETA1}, beta2={ADAM_BETA2}, eps={ADAM_EPSILON})",
        tc.arch,
        tc.sigma,
        T::DTYPE,
        tc.total_steps()
    );
    let log_path = a.out.join("log.csv");
    let mut rows = flcnn::train::TrainLog::default();
    let (model, _) = train_with_observer::<T, _>(&tc, &data, &val, |row, model| {
        let ckpt = a.out.join(format!("epoch-{:03}.flcn", row.epoch + 1));
        save_checkpoint(model, &ckpt)?;
        rows.rows.push(row.clone());
        fs::write(&log_path, rows.to_csv(!a.no_wall_clock)).map_err(|e| {
            TrainError::Checkpoint(CheckpointError::Io(e))
        })?;
        let val = row.val_psnr.map(|p| format!(" val_psnr={p:.2}")).unwrap_or_default();
        eprintln!(
            "epoch {}/{} loss={:.6e} lr={:e}{val} t={:.1}s",
            row.epoch + 1,
            tc.epochs,
            row.mean_loss,
            row.lr,
            row.wall_seconds
        );
        Ok(())
    })?;
    if tc.epochs == 0 {
        fs::write(&log_path, rows.to_csv(!a.no_wall_clock)).map_err(io_err(&log_path))?;
    }
    let final_path = a.out.join("model.flcn");
    save_checkpoint(&model, &final_path)?;
    println!("{}", final_path.display());
    println!("{}", log_path.display());
    Ok(())
}

fn cmd_denoise<T: Scalar>(g: &ModelGraph<T>, a: &DenoiseArgs) -> Result<(), CliError> {
    let img = read_image(&a.input)?;
    let out = g.infer(&to_unit::<T>(&img))?;
    write_pgm(&from_unit(&out, true)?, &a.output)?;
    println!("{}", a.output.display());
    Ok(())
}

fn cmd_eval<T: Scalar>(cfg: &CliConfig, g: &ModelGraph<T>, a: &EvalArgs) -> Result<(), CliError> {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(CliError::Usage(format!("--sigma must be non-negative, got {}", a.sigma)));
    }
    let name = a.name.clone().unwrap_or_else(|| {
        a.dataset
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    if let Some(dir) = &a.save_images {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let report = evaluate_dataset_with(g, &a.dataset, &name, a.sigma, cfg.seed, |image, e| {
        if let Some(dir) = &a.save_images {
            let stem = Path::new(image).with_extension("pgm");
            write_pgm(&e.denoised.to_gray(), dir.join(stem))?;
        }
        eprintln!("{image}: psnr_noisy={:.2} psnr={:.2} ssim={:.4}", e.psnr_noisy, e.psnr, e.ssim);
        Ok(())
    })?;
    eprintln!("ssim: gaussian window 11x11 sigma 1.5, K1=0.01, K2=0.03, L=255");
    match &a.report {
        Some(path) => {
            write_report_csv(&report, path)?;
            println!("{}", path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn layer_table<T: Scalar>(g: &ModelGraph<T>) -> String {
    let params = g.params();
    let mut out = format!("{:<5} {:<28} {:<10} {:>4} {:>6} {:>10}\n", "node", "label", "op", "k", "out_ch", "params");
    for (i, node) in g.nodes().iter().enumerate() {
        let (op, k, count) = match &node.op {
            Op::Input => ("input", 0, 0),
            Op::Conv { weight, bias, kernel } => {
                ("conv", *kernel, params.tensor(*weight).len() + params.tensor(*bias).len())
            }
            Op::BatchNorm { gamma, beta, .. } => {
                ("batchnorm", 0, params.tensor(*gamma).len() + params.tensor(*beta).len())
            }
            Op::Relu => ("relu", 0, 0),
            Op::Concat => ("concat", 0, 0),
            Op::Add => ("add", 0, 0),
            Op::SubtractFromInput => ("residual", 0, 0),
        };
        let k = if k > 0 { format!("{k}x{k}") } else { "-".into() };
        out.push_str(&format!(
            "{:<5} {:<28} {:<10} {:>4} {:>6} {:>10}\n",
            i, node.label, op, k, node.channels, count
        ));
    }
    out
}

fn cmd_info(a: &InfoArgs) -> Result<(), CliError> {
    let print = |table: String, arch: String, counts: (usize, usize), rf: usize, extra: String| {
        let mut out = std::io::stdout().lock();
        let _ = write!(out, "{table}");
        let _ = writeln!(out, "architecture={arch}{extra}");
        let _ = writeln!(out, "trainable_params={}", counts.0);
        let _ = writeln!(out, "total_params={}", counts.1);
        let _ = writeln!(out, "receptive_field={rf}");
    };
    match (&a.source.arch, &a.source.model) {
        (Some(arch), _) => {
            let g = build_flashlight::<f32>(*arch);
            print(layer_table(&g), g.arch().to_string(), g.count_params(), g.receptive_field(), String::new());
        }
        (None, Some(path)) => {
            let model = AnyModel::load(path)?;
            let dtype = model.dtype();
            macro_rules! show {
                ($g:expr) => {{
                    let sigma = $g.sigma.map(|s| format!("\nsigma={s}")).unwrap_or_default();
                    print(
                        layer_table($g),
                        $g.arch().to_string(),
                        $g.count_params(),
                        $g.receptive_field(),
                        format!("\ndtype={dtype}{sigma}"),
                    )
                }};
            }
            match &model {
                AnyModel::F32(g) => show!(g),
                AnyModel::F64(g) => show!(g),
            }
        }
        (None, None) => unreachable!("clap requires one source"),
    }
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> Result<(), CliError> {
    let rows = enumerate_architectures(&a.l, &a.m, &a.n)?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "l,m,n,params");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.arch.l, r.arch.m, r.arch.n, r.trainable_params);
    }
    Ok(())
}

fn cmd_add_noise(cfg: &CliConfig, a: &AddNoiseArgs) -> Result<(), CliError> {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(CliError::Usage(format!("--sigma must be non-negative, got {}", a.sigma)));
    }
    let img = read_image(&a.input)?;
    let noisy = add_awgn(&to_unit::<f64>(&img), a.sigma, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    write_pgm(&from_unit(&noisy, true)?, &a.output)?;
    println!("{}", a.output.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &CliConfig, a: &GradcheckArgs) -> Result<(), CliError> {
    let &[h, w] = a.size.as_slice() else {
        return Err(CliError::Usage("--size takes two values, H,W".into()));
    };
    if h == 0 || w == 0 || !(a.eps > 0.0) {
        return Err(CliError::Usage("--size must be positive and --eps > 0".into()));
    }
    let r = gradient_check(a.arch, (h, w), a.eps, cfg.dtype, cfg.seed)?;
    println!("max_rel_error={:e}", r.max_rel_error);
    println!("max_scaled_error={:e}", r.max_scaled_error);
    println!("checked={}", r.checked);
    println!("kink_skips={}", r.kink_skips);
    println!("max_abs_shift_invariant_grad={:e}", r.max_abs_shift_invariant_grad);
    if let Some((name, k)) = &r.worst {
        println!("worst={name}[{k}]");
    }
    match a.max_error {
        Some(limit) if !(r.max_rel_error < limit) => Err(CliError::GradCheckFailed {
            error: r.max_rel_error,
            limit,
        }),
        _ => Ok(()),
    }
}
