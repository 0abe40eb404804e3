use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fcnet::checkpoint::Checkpoint;
use fcnet::config::{parse_combined, TrainConfig};
use fcnet::data::{encode_png, load_image, load_manifest, write_atomic, LoadedScene, TaskPreset, DEFAULT_MAX_SIDE};
use fcnet::eval::{evaluate, worker_count, write_report, Predictor};
use fcnet::pyramid::lp_decompose;
use fcnet::train::{self, Trainer};
use fcnet::{count_flops, count_params, ExposureSequence, FcNet, ModelConfig, ParamStore, Tensor};

/// Laplacian-pyramid fusion-correction network for exposure correction and
/// multi-exposure fusion.
#[derive(Parser)]
#[command(name = "fcnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a scene manifest, writing checkpoints and a loss log.
    Train(TrainArgs),
    /// Fuse or correct 1..K exposures of one scene into a PNG.
    Infer(InferArgs),
    /// Score a checkpoint on a manifest under a task preset.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts of a model configuration.
    Inspect(ConfigArgs),
    /// Write the Laplacian levels of an image as PNGs.
    PyramidDebug(PyramidArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value settings file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides a config key; repeatable, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, String)]) -> Result<(ModelConfig, TrainConfig)> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        for item in &self.overrides {
            let (k, v) = item.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
            overrides.push((k.trim(), v.trim().to_string()));
        }
        overrides.extend(extra.iter().cloned());
        Ok(parse_combined(&text, &overrides)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG
    #[arg(long)]
    out: PathBuf,
    /// Also write per-level fused bases and outputs next to the output
    #[arg(long)]
    dump_intermediates: bool,
    /// Input exposures, all with the same extents
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model checkpoint; required unless --identity is given
    #[arg(long, required_unless_present = "identity")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "mef")]
    task: TaskPreset,
    /// JSON-lines report path; printed to stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Score the ground truth against itself instead of a model
    #[arg(long, conflicts_with = "checkpoint")]
    identity: bool,
    /// Longer-side cap applied when loading images; 0 disables it
    #[arg(long, default_value_t = DEFAULT_MAX_SIDE)]
    max_side: usize,
}

#[derive(Args)]
struct PyramidArgs {
    image: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    levels: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::PyramidDebug(a) => cmd_pyramid_debug(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let seed: Vec<_> = args.seed.map(|s| ("seed", s.to_string())).into_iter().collect();
    let (model, config) = args.config.resolve(&seed)?;
    config.validate()?;
    let summary = match &args.checkpoint {
        None => train::train(&args.manifest, model, config, &args.out)?,
        Some(path) => {
            let ckpt = if args.config.config.is_some() || !args.config.overrides.is_empty() {
                Checkpoint::load_for(path, &model)?
            } else {
                Checkpoint::load(path)?
            };
            let scenes = load_manifest(&args.manifest)?
                .iter()
                .map(|r| LoadedScene::load(r, config.max_side()))
                .collect::<fcnet::Result<Vec<_>>>()?;
            train::run(Trainer::resume(ckpt, config, scenes)?, &args.out)?
        }
    };
    println!(
        "trained {} steps; first loss {:.4}, final epoch mean {:.4}; checkpoint {}",
        summary.steps,
        summary.first_loss,
        summary.last_epoch_mean_loss,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(FcNet, ParamStore<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let mut store = ParamStore::<f32>::new();
    let net = FcNet::register(ckpt.model.clone(), &mut store)?;
    Ok((net, ckpt.params))
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let (net, params) = load_model(&args.checkpoint)?;
    let frames = args.images.iter().map(|p| load_image(p, None)).collect::<fcnet::Result<Vec<_>>>()?;
    let seq = ExposureSequence::new(frames, None)?;
    let pred = net.predict(&params, &seq)?;

    // Encode everything before touching the filesystem so a failure leaves nothing behind.
    let mut dumps: Vec<(PathBuf, &Tensor<f32>)> = Vec::new();
    if args.dump_intermediates {
        let stem = args.out.file_stem().context("--out needs a file name")?.to_string_lossy();
        let dir = args.out.with_file_name(format!("{stem}_levels"));
        let depth = pred.levels.len();
        for (idx, (o, f)) in pred.levels.iter().zip(&pred.fused).enumerate() {
            let level = depth - idx;
            dumps.push((dir.join(format!("fused_l{level}.png")), f));
            dumps.push((dir.join(format!("output_l{level}.png")), o));
        }
    }
    let encoded = dumps.iter().map(|(p, t)| Ok((p.clone(), encode_png(t)?))).collect::<Result<Vec<_>>>()?;
    let output = encode_png(&pred.output)?;
    for (path, bytes) in encoded {
        fs::create_dir_all(path.parent().expect("joined path"))
            .with_context(|| format!("creating {}", path.display()))?;
        write_atomic(&path, &bytes)?;
    }
    write_atomic(&args.out, &output)?;
    println!("wrote {} ({} input frame(s))", args.out.display(), seq.len());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let records = load_manifest(&args.manifest)?;
    let loaded;
    let predictor = match &args.checkpoint {
        Some(path) => {
            loaded = load_model(path)?;
            Predictor::Model { net: &loaded.0, params: &loaded.1 }
        }
        None => Predictor::Identity,
    };
    let max_side = (args.max_side > 0).then_some(args.max_side);
    let report = evaluate(predictor, &records, args.task, max_side, worker_count())?;
    match &args.out {
        Some(path) => {
            write_report(&report, path)?;
            println!(
                "{} scenes, task {}: mean PSNR {:.4} dB, mean SSIM {:.4}; report {}",
                report.rows.len(),
                args.task,
                report.mean.psnr,
                report.mean.ssim,
                path.display()
            );
        }
        None => print!("{}", report.to_jsonl()),
    }
    Ok(())
}

fn cmd_inspect(args: ConfigArgs) -> Result<()> {
    let (model, _) = args.resolve(&[])?;
    model.validate()?;
    let params = count_params(&model);
    println!("{}", model.to_text().trim_end());
    println!();
    println!("parameters  {params} ({:.3}M)", params as f64 / 1e6);
    println!();
    println!("{:>6} {:>7} {:>12}", "frames", "extent", "GFLOPs");
    for k in [1, 5] {
        for side in [256, 512, 1024] {
            let flops = count_flops(&model, k, side, side);
            println!("{k:>6} {side:>7} {:>12.3}", flops as f64 / 1e9);
        }
    }
    Ok(())
}

fn cmd_pyramid_debug(args: PyramidArgs) -> Result<()> {
    if args.levels == 0 {
        bail!("--levels must be at least 1");
    }
    let image = load_image(&args.image, None)?;
    let stack = lp_decompose(&image, args.levels)?;
    let mut files = Vec::new();
    for (i, h) in stack.details.iter().enumerate() {
        files.push((format!("detail_l{}.png", i + 1), encode_png(&h.map(|v| v + 0.5))?));
    }
    files.push((format!("base_l{}.png", args.levels), encode_png(&stack.base)?));
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (name, bytes) in &files {
        write_atomic(args.out.join(name), bytes)?;
    }
    println!("wrote {} level image(s) to {}", files.len(), args.out.display());
    Ok(())
}
