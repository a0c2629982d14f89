use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rib_core::attention::{BiasKind, KernelKind};
use rib_core::blocks::conv::upscale_nearest;
use rib_core::blocks::{layer_prefix, KeyValues, SstConfig, SstModel, CONFIG_FILE, MODEL_KEYS};
use rib_core::posbias::{
    bias_by_offset, fit_rib_to_rpb, gaussian_bump, rib_bias_matrix, rpb_bias_matrix, FitConfig, RibParams,
    RpbTable, WindowGeometry, RIB_PARAM_NAMES,
};
use rib_core::train::{load_ppm, loss_csv, psnr_y, save_ppm, ssim_y, train_loop, SyntheticSet, TrainConfig, TRAIN_KEYS};
use rib_core::verify::{run_check, VerifyOptions, CHECK_NAMES};
use rib_core::{Error, Result, Tensor};

use crate::bench::{run_bench, BenchOptions, BenchRow};
use crate::report::Record;

pub const SEED_VAR: &str = "RIB_SEED";

#[derive(Debug, Parser)]
#[command(name = "rib", version, about = "Windowed attention with a rank-factorized implicit positional bias")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the verification suite; exit status 0 iff every check passes.
    Verify(VerifyArgs),
    /// Time and measure one attention kernel over several window sizes.
    Bench(BenchArgs),
    /// Train a model on synthetic pairs.
    Train(TrainArgs),
    /// Super-resolve a PPM image with a checkpoint.
    Infer(InferArgs),
    /// Fit positional weights to a fixed relative-position table.
    FitRpb(FitArgs),
    /// Dump one layer's learned bias, averaged per relative offset.
    VizBias(VizArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Run the kernel-equivalence check in f64 at the tighter tolerance.
    #[arg(long)]
    pub f64: bool,
    /// Mis-scale the positional half of Q (negative control).
    #[arg(long = "break-identity", alias = "break-eq6")]
    pub break_identity: bool,
    /// Only run these checks (comma-separated ids).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<usize>,
    /// Directory for artifacts such as the offset table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the machine-readable records to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BiasArg {
    None,
    Rpb,
    Rope,
    Rib,
}

impl From<BiasArg> for BiasKind {
    fn from(b: BiasArg) -> Self {
        match b {
            BiasArg::None => BiasKind::None,
            BiasArg::Rpb => BiasKind::Rpb,
            BiasArg::Rope => BiasKind::Rope,
            BiasArg::Rib => BiasKind::Rib,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KernelArg {
    Naive,
    Streaming,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Naive => KernelKind::Naive,
            KernelArg::Streaming => KernelKind::Streaming,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Token counts per window; each must be a square.
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096])]
    pub n: Vec<usize>,
    #[arg(long, value_enum, default_value = "rib")]
    pub bias: BiasArg,
    #[arg(long, value_enum, default_value = "streaming")]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 32)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long)]
    pub tile: Option<usize>,
    /// Timed repetitions per size (median reported, at least 5).
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Window-parallel evaluation; results are checked against one thread.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Skip naive cases whose score buffers exceed this many bytes.
    #[arg(long, default_value_t = 1 << 30)]
    pub max_naive_bytes: u64,
    /// Also write the records to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key = value file with model and training keys.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory: checkpoint/, loss.csv, train.conf.
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Low-resolution input (PPM/PGM).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Upscaling factor; must match the checkpoint.
    #[arg(long)]
    pub scale: usize,
    /// Ground truth for PSNR/SSIM.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Output image; defaults to `<input stem>_x<scale>.ppm` next to the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TargetArg {
    /// Isotropic Gaussian bump over the offset.
    Gaussian,
    /// `exp(a dy + b dx)`, exactly rank one.
    Separable,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Window side.
    #[arg(long)]
    pub m: usize,
    #[arg(long)]
    pub rank: usize,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub target: TargetArg,
    /// Gaussian width in tokens.
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Write the fitted bias, averaged per offset, as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Layer index counted across blocks.
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Seed from `RIB_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_VAR} must be an unsigned integer, got '{s}'"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_VAR}: {e}"))),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(records: &[Record], file: Option<&Path>) -> Result<()> {
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    print!("{text}");
    match file {
        Some(p) => write_file(p, text),
        None => Ok(()),
    }
}

/// Runs `cmd`; returns the process exit status.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Verify(a) => verify(a),
        Command::Bench(a) => bench(a).map(|_| 0),
        Command::Train(a) => train(a).map(|_| 0),
        Command::Infer(a) => infer(a).map(|_| 0),
        Command::FitRpb(a) => fit(a).map(|_| 0),
        Command::VizBias(a) => viz(a).map(|_| 0),
    }
}

fn verify(a: VerifyArgs) -> Result<u8> {
    let ids = if a.only.is_empty() {
        (1..=CHECK_NAMES.len()).collect()
    } else {
        a.only.clone()
    };
    if let Some(&bad) = ids.iter().find(|&&i| i == 0 || i > CHECK_NAMES.len()) {
        return Err(Error::Config(format!("no check {bad}; ids run 1..={}", CHECK_NAMES.len())));
    }
    let opts = VerifyOptions {
        seed: env_seed()?.unwrap_or(0),
        f64: a.f64,
        break_identity: a.break_identity,
        out_dir: a.out.clone(),
    };
    let mut records = Vec::new();
    let mut failed = 0;
    for id in ids {
        let r = run_check(id, &opts);
        eprintln!("{r}");
        failed += usize::from(!r.passed);
        records.push(
            Record::new("check")
                .field("id", r.id)
                .field("name", r.name)
                .field("passed", r.passed)
                .field("detail", &r.detail)
                .field("time_ms", r.elapsed.as_millis()),
        );
    }
    records.push(
        Record::new("verify")
            .field("checks", records.len())
            .field("failed", failed)
            .field("seed", opts.seed)
            .field("precision", if opts.f64 { "f64" } else { "f32" }),
    );
    emit(&records, a.report.as_deref())?;
    Ok(u8::from(failed > 0))
}

fn bench(a: BenchArgs) -> Result<()> {
    let opts = BenchOptions {
        n: a.n,
        bias: a.bias.into(),
        kernel: a.kernel.into(),
        heads: a.heads,
        head_dim: a.head_dim,
        rank: a.rank,
        tile: a.tile,
        runs: a.runs,
        threads: a.threads,
        seed: env_seed()?.unwrap_or(0),
        max_naive_bytes: a.max_naive_bytes,
    };
    let mut records = Vec::new();
    for row in run_bench(&opts)? {
        match row {
            BenchRow::Done(r) => records.push(r.record()),
            BenchRow::Skipped { n, reason } => {
                eprintln!("warning: skipping n={n}: {reason}");
                records.push(Record::new("skipped").field("n", n).field("reason", reason));
            }
        }
    }
    emit(&records, a.out.as_deref())
}

/// Model and training configuration from one key = value file; `RIB_SEED`
/// overrides the seed.
pub fn read_train_config(path: &Path) -> Result<(SstConfig, TrainConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = KeyValues::parse(&text)?;
    let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS.iter()).copied().collect();
    kv.reject_unknown(&known)?;
    let model = SstConfig::from_kv(&kv)?;
    let mut train = TrainConfig::from_kv(&kv)?;
    if let Some(seed) = env_seed()? {
        train.seed = seed;
    }
    Ok((model, train))
}

/// The synthetic set a training run with `train` draws from.
pub fn training_set(model: &SstConfig, train: &TrainConfig) -> Result<SyntheticSet> {
    SyntheticSet::new(train.samples, train.patch * model.scale, model.scale, train.seed)
}

fn train(a: TrainArgs) -> Result<()> {
    let (model_cfg, cfg) = read_train_config(&a.config)?;
    let data = training_set(&model_cfg, &cfg)?;
    let mut model = SstModel::<f32>::init(model_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let every = (cfg.steps / 20).max(1);
    let quiet = a.quiet;
    let report = train_loop(&mut model, &data, &cfg, |r| {
        if !quiet && (r.step % every == 0 || r.step + 1 == cfg.steps) {
            eprintln!("step {:>5}  loss {:.5}  lr {:.2e}", r.step, r.loss, r.lr);
        }
    })?;
    model.save(&a.out.join("checkpoint"))?;
    write_file(&a.out.join("loss.csv"), loss_csv(&report.records))?;
    write_file(&a.out.join("train.conf"), format!("{}{}", model_cfg.to_text(), cfg.to_text()))?;
    emit(
        &[Record::new("train")
            .field("steps", report.records.len())
            .field("params", model.param_count())
            .field("seed", cfg.seed)
            .field("initial_loss", report.initial_loss().unwrap_or(f64::NAN))
            .field("final_loss", report.final_loss().unwrap_or(f64::NAN))
            .field("out", a.out.display())],
        None,
    )
}

/// Accepts a checkpoint directory or a training output directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(CONFIG_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join("checkpoint");
    if nested.join(CONFIG_FILE).is_file() {
        return Ok(nested);
    }
    Err(Error::io(path.join(CONFIG_FILE), std::io::Error::from(std::io::ErrorKind::NotFound)))
}

fn infer(a: InferArgs) -> Result<()> {
    // everything is loaded and computed before the first write
    let model = SstModel::<f32>::load(&resolve_checkpoint(&a.ckpt)?)?;
    if a.scale != model.cfg.scale {
        return Err(Error::Config(format!("--scale {} but checkpoint is x{}", a.scale, model.cfg.scale)));
    }
    let img = load_ppm(&a.input)?;
    let c = img.dims()[2];
    if c != model.cfg.in_channels {
        return Err(Error::Config(format!(
            "input has {c} channels, model expects {}",
            model.cfg.in_channels
        )));
    }
    let reference = a.reference.as_ref().map(load_ppm).transpose()?;
    let sr = model.infer(&img, None)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.input.with_file_name(format!("{stem}_x{}.ppm", a.scale))
    });
    let mut rec = Record::new("infer")
        .field("in", a.input.display())
        .field("out", out.display())
        .field("height", sr.dims()[0])
        .field("width", sr.dims()[1]);
    if let Some(hr) = &reference {
        let [h, w, _] = [img.dims()[0], img.dims()[1], c];
        let nn = upscale_nearest(&img.reshape([1, h, w, c])?, a.scale)?.reshape([h * a.scale, w * a.scale, c])?;
        let border = a.scale;
        rec = rec
            .field("psnr", format!("{:.4}", psnr_y(&sr, hr, border)?.psnr))
            .field("ssim", format!("{:.6}", ssim_y(&sr, hr, border)?.ssim))
            .field("nearest_psnr", format!("{:.4}", psnr_y(&nn, hr, border)?.psnr))
            .field("nearest_ssim", format!("{:.6}", ssim_y(&nn, hr, border)?.ssim));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_ppm(&out, &sr)?;
    emit(&[rec], None)
}

fn fit(a: FitArgs) -> Result<()> {
    let target = match a.target {
        TargetArg::Gaussian => gaussian_bump::<f64>(a.m, 1, a.sigma, 1.0)?,
        TargetArg::Separable => {
            RpbTable::from_offsets(a.m, 1, |_, dy, dx| 0.5 * (0.1 * dy as f64 + 0.1 * dx as f64).exp())?
        }
    };
    let seed = env_seed()?.unwrap_or(0);
    let p0 = RibParams::init(a.bands, a.hidden, a.rank, 1, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let res = fit_rib_to_rpb(&target, &p0, &FitConfig { steps: a.steps, lr: a.lr })?;
    let mut rec = Record::new("fit")
        .field("m", a.m)
        .field("rank", a.rank)
        .field("steps", a.steps)
        .field("lr", a.lr)
        .field("seed", seed)
        .field("initial_mse", res.curve.first().copied().unwrap_or(f64::NAN))
        .field("mse", res.mse);
    if let Some(path) = &a.out {
        let s = rib_bias_matrix(&WindowGeometry::new(a.m)?, &res.params)?;
        let n = a.m * a.m;
        write_file(path, bias_by_offset(&s.reshape([n, n])?, a.m)?.to_csv())?;
        rec = rec.field("out", path.display());
    }
    emit(&[rec], None)
}

/// One head's `[N, N]` positional bias for global layer index `layer`.
pub fn layer_bias(model: &SstModel<f32>, layer: usize, head: usize) -> Result<(usize, Tensor<f32>)> {
    let cfg = &model.cfg;
    let total = cfg.blocks * cfg.layers;
    if layer >= total {
        return Err(Error::Config(format!("layer {layer} out of range, model has {total}")));
    }
    if head >= cfg.heads {
        return Err(Error::Config(format!("head {head} out of range, model has {}", cfg.heads)));
    }
    let (b, l) = (layer / cfg.layers, layer % cfg.layers);
    let prefix = layer_prefix(b, l);
    let m = cfg.window(l);
    let all = match cfg.bias {
        BiasKind::Rib => {
            let tensors = RIB_PARAM_NAMES.map(|n| model.params.get(&format!("{prefix}rib.{n}")).cloned());
            let [w_h, b_h, w_pq, w_pk] = tensors;
            let p = RibParams::from_tensors(cfg.bands, cfg.hidden, cfg.rank(l), cfg.heads, [w_h?, b_h?, w_pq?, w_pk?])?;
            rib_bias_matrix(&WindowGeometry::new(m)?, &p)?
        }
        BiasKind::Rpb => {
            let table = model.params.get(&format!("{prefix}attn.rpb"))?.clone();
            rpb_bias_matrix(&RpbTable::new(m, table)?)?
        }
        other => {
            return Err(Error::Unsupported(format!("layers with bias '{other}' have no additive bias to show")))
        }
    };
    let n = m * m;
    let one = Tensor::from_fn([n, n], |i| all.as_slice()[head * n * n + i])?;
    Ok((m, one))
}

fn viz(a: VizArgs) -> Result<()> {
    let model = SstModel::<f32>::load(&resolve_checkpoint(&a.ckpt)?)?;
    let (m, bias) = layer_bias(&model, a.layer, a.head)?;
    let table = bias_by_offset(&bias, m)?;
    write_file(&a.out, table.to_csv())?;
    let vals = table.mean.as_slice();
    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    emit(
        &[Record::new("viz-bias")
            .field("layer", a.layer)
            .field("head", a.head)
            .field("window", m)
            .field("offsets", vals.len())
            .field("min", lo)
            .field("max", hi)
            .field("centre", table.get(0, 0))
            .field("out", a.out.display())],
        None,
    )
}
