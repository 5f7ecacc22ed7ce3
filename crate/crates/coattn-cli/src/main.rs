//! `coattn` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime or verification failure, 2 on
//! usage and configuration errors.

mod config;

use clap::{Args, Parser, Subcommand};
use coattn::cascade::{CascadeConfig, Variant};
use coattn::data::{generate_synthetic, read_bundle, read_pairs_tsv, write_bundle, EmbeddingBundle};
use coattn::error::Error;
use coattn::gradcheck::{run_gradcheck, GradCheckConfig};
use coattn::model::{evaluate_retrieval, Direction};
use coattn::objective::{DenominatorMode, LossConfig};
use coattn::trainer::{
    load_checkpoint, resume_with, save_checkpoint, train_with, Optimizer, TrainConfig,
};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

const DEFAULT_VARIANT: Variant = Variant::Iterating;
const DEFAULT_DEPTH: usize = 5;
const DEFAULT_HEADS: usize = 4;
const DEFAULT_BATCH: usize = 32;
const DEFAULT_EPOCHS: usize = 50;
const DEFAULT_LR: f64 = 1e-3;
const DEFAULT_SEED: u64 = 7;
const DEFAULT_TEMPERATURE: f64 = 0.07;
const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Parser)]
#[command(
    name = "coattn",
    version,
    about = "Co-attention cross-modal retrieval: synthesize embedding bundles, train, evaluate, verify gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic embedding bundle (EMB1 file)
    GenSynth(GenSynthArgs),
    /// Train a co-attention model on an embedding bundle
    Train(TrainArgs),
    /// Evaluate retrieval metrics (mAP@10, R@1/5/10) with a checkpoint
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Number of audio/text item pairs (at least 2)
    #[arg(long)]
    items: usize,
    /// Embedding dimension
    #[arg(long)]
    dim: usize,
    /// Frames per audio item
    #[arg(long)]
    frames: usize,
    /// Gaussian noise scale around each item's anchor [default: 0.05]
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// RNG seed [default: 7]
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Output bundle path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input bundle path (flag or config file)
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Output checkpoint path (flag or config file)
    #[arg(long)]
    out: Option<PathBuf>,
    /// key = value configuration file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the per-epoch loss lines to this file
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Tab-separated pair manifest overriding the bundle's pairs
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Resume from a checkpoint; model and loss flags are taken from it
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Cascade variant: single | stacking | iterating [default: iterating]
    #[arg(long)]
    variant: Option<String>,
    /// Cascade depth, 1..=8 [default: 5]
    #[arg(long)]
    depth: Option<usize>,
    /// Attention heads; must divide the bundle dimension [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// Joint space dimension [default: bundle dimension]
    #[arg(long)]
    joint_dim: Option<usize>,
    /// Pairs per training batch (at least 2) [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// Training epochs [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for init and batch shuffling [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// Contrastive temperature [default: 0.07]
    #[arg(long)]
    temperature: Option<f64>,
    /// Loss direction weight in [0,1] [default: 0.5]
    #[arg(long)]
    lambda: Option<f64>,
    /// literal_exclude_positive | include_positive [default: literal_exclude_positive]
    #[arg(long)]
    denominator_mode: Option<String>,
    /// sgd | adam [default: adam]
    #[arg(long)]
    optimizer: Option<String>,
    /// Drop residual connections inside attention blocks
    #[arg(long)]
    no_residual: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint path
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bundle to evaluate on
    #[arg(long)]
    bundle: PathBuf,
    /// Retrieval direction: t2a | a2t [default: t2a]
    #[arg(long, default_value = "t2a")]
    direction: String,
    /// Score recall as hit-or-miss instead of fractional
    #[arg(long)]
    binary_recall: bool,
    /// Also write the report as JSON to this path
    #[arg(long)]
    json: Option<PathBuf>,
    /// Tab-separated pair manifest overriding the bundle's pairs
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Cascade variant: single | stacking | iterating [default: single]
    #[arg(long, default_value = "single")]
    variant: String,
    /// Cascade depth [default: 1]
    #[arg(long, default_value_t = 1)]
    depth: usize,
    /// Feature dimension [default: 8]
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Attention heads [default: 2]
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Audio frames per item [default: 3]
    #[arg(long, default_value_t = 3)]
    frames: usize,
    /// Batch size [default: 4]
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// RNG seed [default: 7]
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, hide = true)]
    break_me: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Dimension { .. } => 2,
        _ => 1,
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), Error> {
    let bundle = generate_synthetic(args.items, args.dim, args.frames, args.noise, args.seed)?;
    write_bundle(&bundle, &args.out)?;
    println!(
        "audio_items={} text_items={} pairs={} dim={} frames={}",
        bundle.audio.len(),
        bundle.text.len(),
        bundle.pairs.len(),
        bundle.dim,
        args.frames
    );
    Ok(())
}

fn load_bundle_with_pairs(
    bundle_path: &PathBuf,
    pairs_path: Option<&PathBuf>,
) -> Result<EmbeddingBundle, Error> {
    let bundle = read_bundle(bundle_path)?;
    match pairs_path {
        Some(path) => bundle.with_pairs(read_pairs_tsv(path)?),
        None => Ok(bundle),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let file = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let bundle_path = args
        .bundle
        .clone()
        .or(file.bundle.clone())
        .ok_or_else(|| Error::Config("no bundle path given (use --bundle or the config file)".into()))?;
    let out_path = args
        .out
        .clone()
        .or(file.out.clone())
        .ok_or_else(|| Error::Config("no checkpoint output path given (use --out or the config file)".into()))?;
    let loss_log = args.loss_log.clone().or(file.loss_log.clone());
    let pairs_path = args.pairs.clone().or(file.pairs.clone());
    let bundle = load_bundle_with_pairs(&bundle_path, pairs_path.as_ref())?;

    let mut log_lines = String::new();
    let mut observer = |epoch: usize, loss: f64| {
        let line = format!("epoch={epoch} loss={loss}");
        println!("{line}");
        log_lines.push_str(&line);
        log_lines.push('\n');
    };

    let checkpoint = if let Some(resume_path) = &args.resume {
        let checkpoint = load_checkpoint(resume_path)?;
        let epochs = args
            .epochs
            .or(file.epochs)
            .unwrap_or(checkpoint.config.epochs);
        resume_with(&bundle, &checkpoint, epochs, &mut observer)?
    } else {
        let variant = match args.variant.as_deref() {
            Some(v) => Variant::parse(v)?,
            None => file.variant.unwrap_or(DEFAULT_VARIANT),
        };
        let cascade = CascadeConfig {
            variant,
            depth: args.depth.or(file.depth).unwrap_or(DEFAULT_DEPTH),
            dim: bundle.dim,
            heads: args.heads.or(file.heads).unwrap_or(DEFAULT_HEADS),
            no_residual: args.no_residual || file.no_residual.unwrap_or(false),
        };
        let loss = LossConfig {
            temperature: args
                .temperature
                .or(file.temperature)
                .unwrap_or(DEFAULT_TEMPERATURE),
            lambda: args.lambda.or(file.lambda).unwrap_or(DEFAULT_LAMBDA),
            denominator_mode: match args.denominator_mode.as_deref() {
                Some(m) => DenominatorMode::parse(m)?,
                None => file
                    .denominator_mode
                    .unwrap_or(DenominatorMode::LiteralExcludePositive),
            },
        };
        let cfg = TrainConfig {
            batch_size: args.batch.or(file.batch_size).unwrap_or(DEFAULT_BATCH),
            epochs: args.epochs.or(file.epochs).unwrap_or(DEFAULT_EPOCHS),
            learning_rate: args.lr.or(file.learning_rate).unwrap_or(DEFAULT_LR),
            seed: args.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            cascade,
            loss,
            optimizer: match args.optimizer.as_deref() {
                Some(o) => Optimizer::parse(o)?,
                None => file.optimizer.unwrap_or(Optimizer::Adam),
            },
            joint_dim: args.joint_dim.or(file.joint_dim).unwrap_or(bundle.dim),
        };
        train_with(&bundle, &cfg, &mut observer)?
    };

    save_checkpoint(&checkpoint, &out_path)?;
    if let Some(path) = loss_log {
        std::fs::write(&path, &log_lines).map_err(|e| Error::io(path, e))?;
    }
    println!("checkpoint={}", out_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let direction = Direction::parse(&args.direction)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let (model, _) = checkpoint.restore()?;
    let bundle = load_bundle_with_pairs(&args.bundle, args.pairs.as_ref())?;
    let report = evaluate_retrieval(&model, &bundle, direction, args.binary_recall)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.json {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Validation(format!("report serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let cfg = GradCheckConfig {
        variant: Variant::parse(&args.variant)?,
        depth: args.depth,
        dim: args.dim,
        heads: args.heads,
        frames: args.frames,
        batch: args.batch,
        seed: args.seed,
        break_me: args.break_me,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    for group in &report.groups {
        println!("group={} max_rel_err={}", group.name, group.max_error);
    }
    if report.passed() {
        println!("gradcheck=pass tolerance={}", report.tolerance);
        Ok(())
    } else {
        let names: Vec<&str> = report
            .failing_groups()
            .iter()
            .map(|g| g.name.as_str())
            .collect();
        println!("gradcheck=fail tolerance={}", report.tolerance);
        Err(Error::Contract(format!(
            "gradient check failed for: {}",
            names.join(", ")
        )))
    }
}
