//! `periph`: scripted access to every stage of the pipeline.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad flags, 3 I/O, 4 checkpoint
//! mismatch, 5 training diverged.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use periph_core::corpus::{
    list_pngs, load_square, make_target, procedural_image, PairEntry, PairManifest, TargetConfig, TargetOracle,
};
use periph_core::evalharness::{
    benchmark, fovea_diff, pixel_diff, speedup, stat_error_report, BlurBackend, EvalReport, FgnBackend, Foveator,
    IdentityBackend, ImageRecord, StatmatchBackend,
};
use periph_core::fgn::{self, FgnArch, FgnParams, TrainOptions};
use periph_core::foveamask::diagonal;
use periph_core::imagekit::{read_png, write_png, Image};
use periph_core::pooling::{build_layout, DEFAULT_BOUMA, DEFAULT_R_MIN};
use periph_core::radialblur::DEFAULT_SIGMA_MAX;
use periph_core::statmatch::SynthOptions;
use periph_core::{Error, Fixation};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "periph", version, about = "Peripheral vision simulation")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where reports, manifests and generated files go.
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
enum Command {
    /// Foveate one image at one fixation.
    Foveate(FoveateArgs),
    /// Write a seeded procedural image corpus.
    GenCorpus(GenCorpusArgs),
    /// Build (input, target) training pairs from a corpus.
    GenTargets(GenTargetsArgs),
    /// Train an FGN on generated pairs.
    Train(TrainArgs),
    /// Write an untrained checkpoint.
    InitCheckpoint(InitCheckpointArgs),
    /// Evaluate a checkpoint; writes JSON and CSV reports.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FoveateBackend {
    Blur,
    Fgn,
}

#[derive(Debug, Args, Serialize)]
struct FoveateArgs {
    #[arg(value_enum)]
    backend: FoveateBackend,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Fixation column; defaults to the image centre.
    #[arg(long)]
    fx: Option<f64>,
    /// Fixation row; defaults to the image centre.
    #[arg(long)]
    fy: Option<f64>,
    /// Defaults to an eighth of the image width.
    #[arg(long)]
    fovea_radius: Option<f64>,
    #[arg(long, required_if_eq("backend", "fgn"))]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SIGMA_MAX)]
    sigma_max: f64,
    /// Blur with the layered approximation at this sigma step.
    #[arg(long)]
    layer_step: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct GenCorpusArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Debug, Args, Serialize)]
struct GenTargetsArgs {
    /// Directory of PNGs; each is centre-cropped and resized to `--size`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value = "statmatch")]
    oracle: String,
    #[arg(long, default_value_t = 8.0)]
    fovea_radius: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_MAX)]
    sigma_max: f64,
    #[command(flatten)]
    layout: LayoutArgs,
    #[arg(long, default_value_t = 400)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Independent syntheses per source image.
    #[arg(long, default_value_t = 1)]
    seeds_per_image: usize,
}

#[derive(Debug, Clone, Copy, Args, Serialize)]
struct LayoutArgs {
    /// Pooling region radius as a fraction of eccentricity.
    #[arg(long, default_value_t = DEFAULT_BOUMA)]
    bouma: f64,
    /// Smallest pooling region radius in pixels.
    #[arg(long, default_value_t = DEFAULT_R_MIN)]
    r_min: f64,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Directory holding a pairs manifest from `gen-targets`.
    #[arg(long)]
    pairs: PathBuf,
    /// Divide every hidden layer's kernel count by this.
    #[arg(long, default_value_t = 8)]
    arch_scale: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    lr_decay: f64,
    /// Scale layer learning rates by inverse fan-in.
    #[arg(long)]
    fan_in_lr: bool,
    #[arg(long)]
    out_checkpoint: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct InitCheckpointArgs {
    #[arg(long, default_value_t = 8)]
    arch_scale: usize,
    /// All parameters zero instead of seeded uniform.
    #[arg(long)]
    zero: bool,
    /// Training frame size, which fixes the mask normalizer.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EvalMode {
    Pixel,
    Stats,
    Bench,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Without a checkpoint, pixel and stats compare inputs to targets
    /// directly and bench times a seeded untrained network.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pairs directory (pixel, stats) or PNG directory (bench).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    mode: EvalMode,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Bench frame size.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    arch_scale: usize,
    #[arg(long, default_value_t = 400)]
    max_iters: usize,
    #[command(flatten)]
    layout: LayoutArgs,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: format!("{context}: {e}"),
        }
    }

    fn checkpoint(path: &Path, e: impl std::fmt::Display) -> Self {
        Self {
            code: 4,
            message: format!("checkpoint {}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::MalformedInput(_) => 3,
            Error::BadMagic | Error::VersionUnsupported(_) | Error::PayloadSizeMismatch { .. } => 4,
            Error::DivergedLoss { .. } => 5,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("periph: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("periph: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    fs::create_dir_all(&cli.output_dir).map_err(|e| Failure::io(cli.output_dir.display(), e))?;
    let name = match &cli.command {
        Command::Foveate(_) => "foveate",
        Command::GenCorpus(_) => "gen-corpus",
        Command::GenTargets(_) => "gen-targets",
        Command::Train(_) => "train",
        Command::InitCheckpoint(_) => "init-checkpoint",
        Command::Eval(_) => "eval",
    };
    // reproducibility header: the fully resolved configuration
    let header = serde_json::to_string_pretty(cli).map_err(|e| Failure::io("run header", e))?;
    write(&cli.output_dir.join(format!("{name}.run.json")), header.as_bytes())?;
    match &cli.command {
        Command::Foveate(a) => foveate(a),
        Command::GenCorpus(a) => gen_corpus(cli, a),
        Command::GenTargets(a) => gen_targets(cli, a),
        Command::Train(a) => train(cli, a),
        Command::InitCheckpoint(a) => init_checkpoint(cli, a),
        Command::Eval(a) => eval(cli, a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| Failure::io(path.display(), e))
}

fn read_image(path: &Path) -> CliResult<Image<f32>> {
    read_png(path).map_err(|e| Failure::io(path.display(), e))
}

fn write_image(path: &Path, img: &Image<f32>) -> CliResult {
    write_png(path, img).map_err(|e| Failure::io(path.display(), e))
}

fn load_checkpoint(path: &Path) -> CliResult<FgnParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path.display(), e))?;
    fgn::load_checkpoint(&bytes).map_err(|e| Failure::checkpoint(path, e))
}

fn foveate(a: &FoveateArgs) -> CliResult {
    let img = read_image(&a.input)?;
    let (h, w) = (img.height(), img.width());
    let centre = Fixation::centered(h, w);
    let fix = Fixation::new(
        a.fx.unwrap_or(centre.fx),
        a.fy.unwrap_or(centre.fy),
        a.fovea_radius.unwrap_or(centre.fovea_radius),
    );
    let out = match a.backend {
        FoveateBackend::Blur => BlurBackend {
            sigma_max: a.sigma_max,
            layer_step: a.layer_step,
        }
        .foveate(&img, &fix)?,
        FoveateBackend::Fgn => {
            let path = a.checkpoint.as_deref().expect("clap requires it for fgn");
            let params = load_checkpoint(path)?;
            let k = params.arch.max_kernel();
            if h.min(w) < k {
                return Err(Failure::checkpoint(path, format!("{w}x{h} input is smaller than its {k}x{k} kernels")));
            }
            fgn::foveate(&params, &img, &fix)?
        }
    };
    write_image(&a.output, &out)
}

fn gen_corpus(cli: &Cli, a: &GenCorpusArgs) -> CliResult {
    for i in 0..a.count {
        let img = procedural_image(cli.seed + i as u64, a.size, a.size);
        write_image(&cli.output_dir.join(format!("img_{i:04}.png")), &img)?;
    }
    println!("wrote {} images to {}", a.count, cli.output_dir.display());
    Ok(())
}

fn gen_targets(cli: &Cli, a: &GenTargetsArgs) -> CliResult {
    let oracle: TargetOracle = a
        .oracle
        .parse()
        .map_err(|e: Error| Failure { code: 2, message: e.to_string() })?;
    let sources = list_pngs(&a.corpus).map_err(|e| Failure::io(a.corpus.display(), e))?;
    if sources.is_empty() {
        return Err(Failure::io(a.corpus.display(), "no PNG files"));
    }
    let config = TargetConfig {
        oracle,
        fovea_radius: a.fovea_radius,
        sigma_max: a.sigma_max,
        bouma: a.layout.bouma,
        r_min: a.layout.r_min,
        synth: SynthOptions {
            max_iters: a.max_iters,
            tol: a.tol,
            ..SynthOptions::default()
        },
    };
    let mut entries = Vec::new();
    for (i, path) in sources.iter().enumerate() {
        let img = load_square(path, a.size).map_err(|e| Failure::io(path.display(), e))?;
        let input = format!("input_{i:04}.png");
        write_image(&cli.output_dir.join(&input), &img)?;
        for k in 0..a.seeds_per_image.max(1) {
            let seed = cli.seed + (i * a.seeds_per_image.max(1) + k) as u64;
            let t = make_target(&img, &config, seed)?;
            let target = format!("target_{i:04}_{k}.png");
            write_image(&cli.output_dir.join(&target), &t.image)?;
            let flagged = !t.converged;
            eprintln!(
                "{} seed {seed}: loss {}{}",
                path.display(),
                t.final_loss.map_or("-".into(), |l| format!("{l:.3e}")),
                if flagged { " (above tolerance)" } else { "" }
            );
            entries.push(PairEntry {
                input: input.clone(),
                target,
                seed,
                final_loss: t.final_loss,
                iterations: t.iterations,
                flagged,
            });
        }
    }
    let n = entries.len();
    PairManifest {
        size: a.size,
        config,
        entries,
    }
    .save(&cli.output_dir)
    .map_err(|e| Failure::io("manifest", e))?;
    println!("wrote {n} pairs to {}", cli.output_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainingManifest<'a> {
    pairs: &'a Path,
    images: usize,
    arch: &'a FgnArch,
    options: &'a TrainOptions,
    loss_history: &'a [f64],
    final_loss: Option<f64>,
    checkpoint: &'a Path,
}

fn load_pair_set(dir: &Path) -> CliResult<(PairManifest, Vec<(Image<f32>, Image<f32>)>)> {
    let manifest = PairManifest::load(dir).map_err(|e| Failure::io(dir.display(), e))?;
    let pairs = manifest.load_pairs(dir).map_err(|e| Failure::io(dir.display(), e))?;
    if pairs.is_empty() {
        return Err(Failure::io(dir.display(), "manifest lists no pairs"));
    }
    Ok((manifest, pairs))
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult {
    let (manifest, pairs) = load_pair_set(&a.pairs)?;
    let opts = TrainOptions {
        seed: cli.seed,
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        fan_in_lr: a.fan_in_lr,
        lr_decay: a.lr_decay,
        momentum: a.momentum,
        fovea_radius: manifest.config.fovea_radius,
    };
    let arch = FgnArch::scaled(a.arch_scale);
    let params = fgn::train_with_progress(&pairs, arch.clone(), &opts, |epoch, loss| {
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    })?;
    write(&a.out_checkpoint, &fgn::save_checkpoint(&params)?)?;
    let record = TrainingManifest {
        pairs: &a.pairs,
        images: pairs.len(),
        arch: &arch,
        options: &opts,
        loss_history: &params.meta.loss_history,
        final_loss: params.meta.loss_history.last().copied(),
        checkpoint: &a.out_checkpoint,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| Failure::io("training manifest", e))?;
    write(&cli.output_dir.join("training.json"), json.as_bytes())?;
    println!("wrote {}", a.out_checkpoint.display());
    Ok(())
}

fn init_checkpoint(cli: &Cli, a: &InitCheckpointArgs) -> CliResult {
    let arch = FgnArch::scaled(a.arch_scale);
    let normalizer = diagonal(a.size, a.size);
    let params = if a.zero {
        FgnParams::<f32>::zeros(arch, normalizer)?
    } else {
        FgnParams::<f32>::init(arch, normalizer, cli.seed)?
    };
    write(&a.out, &fgn::save_checkpoint(&params)?)
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult {
    let params = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let (records, runtimes) = match a.mode {
        EvalMode::Pixel | EvalMode::Stats => {
            let (manifest, pairs) = load_pair_set(&a.corpus)?;
            let backend: Box<dyn Foveator> = match &params {
                Some(p) => Box::new(FgnBackend { params: p.clone() }),
                None => Box::new(IdentityBackend),
            };
            let mut records = Vec::with_capacity(pairs.len());
            for (input, target) in &pairs {
                let (h, w) = (input.height(), input.width());
                let fix = Fixation::centered(h, w).with_radius(manifest.config.fovea_radius);
                let out = backend.foveate(input, &fix)?;
                let mut rec = ImageRecord {
                    input_hash: input.content_hash(),
                    pixel_diff_mean: None,
                    fovea_diff_mean: None,
                    stat_err_mean: None,
                    stat_err_std: None,
                };
                if a.mode == EvalMode::Pixel {
                    rec.pixel_diff_mean = Some(pixel_diff(&out, target)?);
                    rec.fovea_diff_mean = Some(fovea_diff(&out, target, &fix)?);
                } else {
                    let layout = build_layout(h, w, &fix, a.layout.bouma, a.layout.r_min)?.normalize_weights()?;
                    let e = &stat_error_report(&[(out, target.clone())], &layout)?[0];
                    rec.stat_err_mean = Some(e.mean);
                    rec.stat_err_std = Some(e.std);
                }
                records.push(rec);
            }
            (records, Vec::new())
        }
        EvalMode::Bench => {
            let paths = list_pngs(&a.corpus).map_err(|e| Failure::io(a.corpus.display(), e))?;
            if paths.is_empty() {
                return Err(Failure::io(a.corpus.display(), "no PNG files"));
            }
            let images = paths
                .iter()
                .map(|p| {
                    let img = load_square(p, a.size).map_err(|e| Failure::io(p.display(), e))?;
                    let fix = Fixation::centered(a.size, a.size);
                    Ok((img, fix))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let params = match params {
                Some(p) => p,
                None => FgnParams::init(FgnArch::scaled(a.arch_scale), diagonal(a.size, a.size), cli.seed)?,
            };
            let slow = StatmatchBackend {
                options: SynthOptions {
                    seed: cli.seed,
                    max_iters: a.max_iters,
                    ..SynthOptions::default()
                },
                bouma: a.layout.bouma,
                r_min: a.layout.r_min,
            };
            let fast = FgnBackend { params };
            let slow_rt = benchmark(&slow, &images, a.reps)?;
            let fast_rt = benchmark(&fast, &images, a.reps)?;
            let records = images
                .iter()
                .map(|(img, _)| ImageRecord {
                    input_hash: img.content_hash(),
                    pixel_diff_mean: None,
                    fovea_diff_mean: None,
                    stat_err_mean: None,
                    stat_err_std: None,
                })
                .collect();
            (records, vec![slow_rt, fast_rt])
        }
    };
    let report = EvalReport::new(records, runtimes, a)?;
    let stem = match a.mode {
        EvalMode::Pixel => "eval_pixel",
        EvalMode::Stats => "eval_stats",
        EvalMode::Bench => "eval_bench",
    };
    write(&cli.output_dir.join(format!("{stem}.json")), report.to_json()?.as_bytes())?;
    write(&cli.output_dir.join(format!("{stem}.csv")), report.records_csv()?.as_bytes())?;
    let g = &report.aggregates;
    match a.mode {
        EvalMode::Pixel => println!(
            "pixel_diff {:.4} fovea_diff {:.4} over {} images",
            g.pixel_diff_mean.unwrap_or(f64::NAN),
            g.fovea_diff_mean.unwrap_or(f64::NAN),
            g.images
        ),
        EvalMode::Stats => println!(
            "stat error mean {:.4}% max {:.4}% over {} images",
            g.stat_err_mean.unwrap_or(f64::NAN),
            g.stat_err_max.unwrap_or(f64::NAN),
            g.images
        ),
        EvalMode::Bench => {
            let rt = &report.runtimes;
            println!(
                "statmatch {:.4}s fgn {:.6}s speedup {:.1}x",
                rt[0].mean_s,
                rt[1].mean_s,
                speedup(&rt[0], &rt[1])
            );
        }
    }
    Ok(())
}
