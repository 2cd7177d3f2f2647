//! `dsrnet`: synthesize, train, infer, evaluate and montage.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 missing or unreadable
//! resource, 3 numerical divergence during training.

mod config;
mod montage;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dsrnet::checkpoint::load_checkpoint;
use dsrnet::data::{build_synthetic_dataset, BlurConfig, DatasetManifest, GammaRanges, SynthesisConfig, MANIFEST_FILE};
use dsrnet::metrics::{evaluate, DatasetScore, DirectoryPredictor, EvalReport, ModelPredictor, Predictor, SsimOptions};
use dsrnet::train::{load_backbone, load_model, load_records, JsonlLog, TrainConfig, Trainer, LOG_FILE};
use dsrnet::{Error, Image, Result};

use crate::config::TrainOverrides;

#[derive(Parser)]
#[command(name = "dsrnet", version, about = "Single-image reflection separation")]
struct Cli {
    /// Log more (repeat for debug output)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Blend pairs of source images into a synthetic training set
    Synthesize(SynthesizeArgs),
    /// Train a model from one or more manifests
    Train(TrainArgs),
    /// Separate images with a trained checkpoint
    Infer(InferArgs),
    /// Score transmission estimates against ground truth
    Evaluate(EvaluateArgs),
    /// Lay out inputs, predictions and ground truth in a grid
    Montage(MontageArgs),
}

#[derive(clap::Args)]
struct SynthesizeArgs {
    #[arg(long)]
    source_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 224)]
    crop_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "0.8:1.0", value_parser = parse_range)]
    gamma1_range: (f64, f64),
    #[arg(long, default_value = "0.4:1.0", value_parser = parse_range)]
    gamma2_range: (f64, f64),
    /// Range of the Gaussian blur applied to reflections
    #[arg(long, default_value = "1:5", value_parser = parse_range)]
    blur_sigma: (f64, f64),
    #[arg(long)]
    no_blur: bool,
    #[arg(long)]
    no_flip: bool,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Flat TOML file with any of the training keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Ablation switch such as reconstruction=linear, interaction=ytmt, encoder=hypercolumn
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file or directory of images
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the residue, remapped from (-1, 1) to (0, 1)
    #[arg(long)]
    with_residue: bool,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Run this checkpoint on every manifest
    #[arg(long, conflicts_with_all = ["predictions", "summary"])]
    checkpoint: Option<PathBuf>,
    /// Read `<stem>_T.png` estimates from this directory instead of running a model
    #[arg(long, conflicts_with = "summary")]
    predictions: Option<PathBuf>,
    /// Aggregate published per-dataset means (JSON list of {name, image_count, mean_psnr, mean_ssim})
    #[arg(long)]
    summary: Option<PathBuf>,
    /// `name=path` or `path` (named after its directory); repeatable
    #[arg(long = "manifest")]
    manifests: Vec<String>,
    /// Output prefix: writes `<out>.json` and `<out>.csv`
    #[arg(long)]
    out: PathBuf,
    /// Score luma instead of averaging RGB channels
    #[arg(long)]
    grayscale: bool,
}

#[derive(clap::Args)]
struct MontageArgs {
    /// Mixed input images, one row each
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Directory with `<stem>_T.png`, `<stem>_R.png` and optional `<stem>_residue.png`
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory with ground-truth `<stem>_T.png`; defaults to each input's directory
    #[arg(long)]
    gt_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err(format!("range {lo}:{hi} is reversed"));
    }
    Ok((lo, hi))
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| Error::Resource(format!("cannot read {}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Resource(format!("no images in {}", input.display())));
    }
    Ok(files)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Resource(format!("cannot create {}: {e}", dir.display())))
}

fn synthesize(args: SynthesizeArgs) -> Result<()> {
    let cfg = SynthesisConfig {
        count: args.count,
        crop_size: args.crop_size,
        seed: args.seed,
        gammas: GammaRanges {
            gamma1: args.gamma1_range,
            gamma2: args.gamma2_range,
        },
        blur: BlurConfig {
            enabled: !args.no_blur,
            sigma_min: args.blur_sigma.0,
            sigma_max: args.blur_sigma.1,
        },
        flip: !args.no_flip,
        split: args.split,
    };
    let manifest = build_synthetic_dataset(&args.source_dir, &args.out, &cfg)?;
    let sidecar = args.out.join("synthesis_config.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::Resource(format!("{}: {e}", sidecar.display())))?;
    println!("wrote {} pairs and {}", manifest.len(), args.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => TrainOverrides::from_file(p)?,
        None => TrainOverrides::default(),
    };
    let overrides = args.overrides.over(file).with_ablations(&args.ablate)?;
    let checkpoint = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut cfg = match &checkpoint {
        Some(c) => TrainConfig::from_snapshot(&c.train)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    if cfg.manifests.is_empty() {
        return Err(Error::Config("no training manifest given (--manifest)".into()));
    }
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);
    let records = load_records(&cfg.manifests)?;
    create_dir(&cfg.checkpoint_dir)?;
    std::fs::write(cfg.checkpoint_dir.join("run_config.json"), serde_json::to_string_pretty(&cfg)?)
        .map_err(|e| Error::Resource(format!("cannot write run config: {e}")))?;
    let log_path = overrides.log.clone().unwrap_or_else(|| cfg.checkpoint_dir.join(LOG_FILE));
    let mut trainer = match &checkpoint {
        Some(c) => Trainer::resume(cfg, records, c)?,
        None => Trainer::new(cfg, records)?,
    };
    let mut sink = JsonlLog::create(&log_path, checkpoint.is_some())?;
    let last = trainer.run(|entry| {
        log::info!("step {} epoch {} total {:.5}", entry.step, entry.epoch, entry.total);
        sink.write(entry)
    })?;
    println!("trained {} steps; last checkpoint {}", trainer.step_count(), last.display());
    Ok(())
}

fn infer(args: InferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = load_model(&ckpt)?;
    let backbone = load_backbone(&ckpt, model.dtype())?;
    create_dir(&args.out)?;
    for path in image_files(&args.input)? {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let out = model.infer(&Image::load(&path)?, &backbone, args.with_residue)?;
        out.transmission.save_png(args.out.join(format!("{stem}_T.png")))?;
        out.reflection.save_png(args.out.join(format!("{stem}_R.png")))?;
        if args.with_residue {
            out.residue.map(|v| (v + 1.0) / 2.0).save_png(args.out.join(format!("{stem}_residue.png")))?;
        }
        log::info!("separated {}", path.display());
    }
    Ok(())
}

fn named_manifest(spec: &str) -> Result<(String, DatasetManifest)> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, p)
        }
    };
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path };
    Ok((name, DatasetManifest::read(&path)?))
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let report = if let Some(summary) = &args.summary {
        let text = std::fs::read_to_string(summary).map_err(|e| Error::Resource(format!("{}: {e}", summary.display())))?;
        let datasets: Vec<DatasetScore> = serde_json::from_str(&text)?;
        EvalReport::from_summaries(datasets)?
    } else {
        if args.manifests.is_empty() {
            return Err(Error::Domain("no manifest given (--manifest)".into()));
        }
        let manifests = args.manifests.iter().map(|m| named_manifest(m)).collect::<Result<Vec<_>>>()?;
        let opts = SsimOptions { grayscale: args.grayscale };
        match (&args.checkpoint, &args.predictions) {
            (Some(c), _) => {
                let ckpt = load_checkpoint(c)?;
                let model = load_model(&ckpt)?;
                let backbone = load_backbone(&ckpt, model.dtype())?;
                let mut predictor = ModelPredictor {
                    model: &model,
                    backbone: &backbone,
                };
                evaluate(&manifests, &mut predictor as &mut dyn Predictor, opts)?
            }
            (None, Some(dir)) => evaluate(&manifests, &mut DirectoryPredictor { dir: dir.clone() }, opts)?,
            (None, None) => return Err(Error::Config("give --checkpoint, --predictions or --summary".into())),
        }
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let json = args.out.with_extension("json");
    let csv = args.out.with_extension("csv");
    report.write(&json, &csv)?;
    for d in &report.datasets {
        println!("{:<16} n={:<5} psnr {:.2} ssim {:.3}", d.name, d.image_count, d.mean_psnr, d.mean_ssim);
    }
    let a = &report.aggregate;
    println!("{:<16} n={:<5} psnr {:.2} ssim {:.3}", "average", a.image_count, a.weighted_psnr, a.weighted_ssim);
    Ok(())
}

fn montage_cmd(args: MontageArgs) -> Result<()> {
    let mut notes = Vec::new();
    let rows = montage::collect_rows(&args.inputs, &args.pred_dir, args.gt_dir.as_deref(), &mut notes)?;
    for n in &notes {
        eprintln!("montage: {n}");
    }
    let grid = montage::compose(&rows)?;
    grid.save_png(&args.out)?;
    println!("wrote {} ({} rows)", args.out.display(), rows.len());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        e if e.is_resource() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synthesize(a) => synthesize(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Montage(a) => montage_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
