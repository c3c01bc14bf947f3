//! Command-line interface: train, eval, predict, gradcheck, synth.
//!
//! Exit codes: 0 success, 1 failed verification (gradcheck), 2 usage or
//! configuration errors, 3 numeric failure (non-finite loss). Flags override
//! config-file keys, which override built-in defaults; `ASEG_SEED` is the
//! seed fallback when neither a flag nor a config key sets one.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Precision, RunConfig};
use crate::data::{
    load_dataset_dir, load_image_pgm, resize_bilinear, save_dataset_dir, save_heatmap,
    save_image_pgm, synth_dataset, Dataset, GrayImage,
};
use crate::metrics::binarize;
use crate::model::{forward_traced, ModelParams};
use crate::scalar::Scalar;
use crate::train::{epoch_log_csv, evaluate, split_dataset, train, TrainError};
use crate::verify::{gradcheck, GradcheckSettings};
use crate::Shape;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

fn config_keys_help() -> String {
    RunConfig::describe_keys()
}

#[derive(Parser)]
#[command(
    name = "aseg",
    version,
    about = "Attention-augmented residual U-Net segmentation engine",
    after_long_help = config_keys_help()
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory or a synthetic set; writes the best
    /// checkpoint and the epoch log
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Predict a mask (and optional attention heatmaps) for one image
    Predict(PredictArgs),
    /// Compare every parameter gradient against finite differences
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset to disk as PGM pairs
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set attn.hal=false (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// RNG seed (overrides config and the ASEG_SEED fallback)
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric mode: f32 (fast) or f64 (bit-reproducible verification)
    #[arg(long)]
    precision: Option<Precision>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        let mut seed_from_config = false;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            for (key, value) in crate::config::parse_kv_lines(&text)? {
                if key == "train.seed" {
                    seed_from_config = true;
                }
                cfg.set(&key, &value)?;
            }
        }
        for assignment in &self.sets {
            let Some((key, value)) = assignment.split_once('=') else {
                return Err(format!("--set expects KEY=VALUE, got `{assignment}`"));
            };
            if key.trim() == "train.seed" {
                seed_from_config = true;
            }
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        } else if !seed_from_config {
            if let Ok(env_seed) = std::env::var("ASEG_SEED") {
                cfg.train.seed = env_seed
                    .parse()
                    .map_err(|e| format!("ASEG_SEED: {e}"))?;
            }
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory of <id>.pgm / <id>_mask.pgm pairs
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Generate a synthetic dataset of this many samples instead
    #[arg(long)]
    synthetic: Option<usize>,
    /// Output directory for checkpoint.aseg and log.csv
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer step cap across all epochs (0 = none)
    #[arg(long = "epochs-max-steps", visible_alias = "max-steps")]
    max_steps: Option<usize>,
    /// Stop once the logged validation Dice reaches this value
    #[arg(long)]
    stop_dice: Option<f64>,
    /// Split fractions `train,test,validation`
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<usize>,
    /// Which split to evaluate
    #[arg(long, default_value = "test", value_parser = ["train", "test", "validation", "all"])]
    split: String,
    #[arg(long)]
    threshold: Option<f64>,
    /// Write per-sample rows to this CSV file (also printed to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    checkpoint: PathBuf,
    /// Input image (binary PGM)
    image: PathBuf,
    /// Output mask path (binary PGM, values 0/255)
    #[arg(long)]
    out: PathBuf,
    /// Write one heatmap per level per attention branch into this directory
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Input edge of the verification model
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = 2)]
    base_channels: usize,
    #[arg(long, default_value_t = 14)]
    seed: u64,
    /// Base finite-difference step
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Test hook: corrupt one analytic gradient of the named group to
    /// exercise the failure path
    #[arg(long, hide = true)]
    corrupt_group: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples to generate
    #[arg(long)]
    count: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Image edge in pixels
    #[arg(long, default_value_t = 128)]
    edge: usize,
}

/// Parses arguments from the process environment and runs; returns the exit
/// code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    run(cli)
}

fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match outcome {
        Ok(code) => code,
        Err(CmdError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CmdError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            EXIT_NUMERIC
        }
    }
}

enum CmdError {
    Usage(String),
    Numeric(String),
}

impl From<String> for CmdError {
    fn from(msg: String) -> Self {
        CmdError::Usage(msg)
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CmdError::Numeric(e.to_string()),
            other => CmdError::Usage(other.to_string()),
        }
    }
}

fn load_dataset(
    dataset: &Option<PathBuf>,
    synthetic: Option<usize>,
    edge: usize,
    seed: u64,
) -> Result<Dataset, CmdError> {
    match (dataset, synthetic) {
        (Some(dir), None) => load_dataset_dir(dir, edge).map_err(|e| CmdError::Usage(e.to_string())),
        (None, Some(n)) => {
            if n == 0 {
                return Err(CmdError::Usage("--synthetic needs at least 1 sample".into()));
            }
            Ok(synth_dataset(n, seed, edge))
        }
        _ => Err(CmdError::Usage(
            "provide exactly one of --dataset or --synthetic".into(),
        )),
    }
}

fn cmd_train(args: TrainArgs) -> Result<i32, CmdError> {
    let mut cfg = args.config.build()?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.max_steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = args.stop_dice {
        cfg.train.stop_dice = (v > 0.0).then_some(v);
    }
    if let Some(v) = &args.split {
        cfg.set("train.split", v)?;
    }
    cfg.model.validate().map_err(|e| e.to_string())?;
    cfg.train.validate()?;

    let dataset = load_dataset(
        &args.dataset,
        args.synthetic,
        cfg.model.input_hw.0,
        cfg.train.seed,
    )?;

    match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, &dataset, &args.out_dir),
        Precision::F64 => run_train::<f64>(&cfg, &dataset, &args.out_dir),
    }
}

fn run_train<T: Scalar>(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<i32, CmdError> {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut params =
        ModelParams::<T>::init(&cfg.model, &mut rng).map_err(|e| CmdError::Usage(e.to_string()))?;
    let outcome = train(&mut params, dataset, &cfg.train)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CmdError::Usage(format!("{}: {e}", out_dir.display())))?;
    let ckpt_path = out_dir.join("checkpoint.aseg");
    save_checkpoint(&outcome.best, None, outcome.steps_taken as u64, &ckpt_path)
        .map_err(|e| CmdError::Usage(e.to_string()))?;
    let log_path = out_dir.join("log.csv");
    std::fs::write(&log_path, epoch_log_csv(&outcome.log))
        .map_err(|e| CmdError::Usage(format!("{}: {e}", log_path.display())))?;

    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({} steps), final val_dice {:.4}, best val_dice {:.4} at epoch {}",
        outcome.log.len(),
        outcome.steps_taken,
        last.val_dice,
        outcome.best_val_dice,
        outcome.best_epoch
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, CmdError> {
    let cfg = args.config.build()?;
    match cfg.precision {
        Precision::F32 => run_eval::<f32>(&args, &cfg),
        Precision::F64 => run_eval::<f64>(&args, &cfg),
    }
}

fn run_eval<T: Scalar>(args: &EvalArgs, cfg: &RunConfig) -> Result<i32, CmdError> {
    let ckpt =
        load_checkpoint::<T>(&args.checkpoint).map_err(|e| CmdError::Usage(e.to_string()))?;
    let edge = ckpt.params.config.input_hw.0;
    let dataset = load_dataset(&args.dataset, args.synthetic, edge, cfg.train.seed)?;
    let split = split_dataset(dataset.len(), cfg.train.split, cfg.train.seed)?;
    let indices: Vec<usize> = match args.split.as_str() {
        "train" => split.train,
        "test" => split.test,
        "validation" => split.validation,
        _ => (0..dataset.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CmdError::Usage(format!(
            "split `{}` is empty for {} samples at fractions {:?}",
            args.split,
            dataset.len(),
            cfg.train.split
        )));
    }
    let threshold = args.threshold.unwrap_or(cfg.train.threshold);
    let report = evaluate(&ckpt.params, &dataset, &indices, threshold, cfg.train.batch_size)?;
    println!(
        "split {} ({} samples): dice {:.6}, iou {:.6}",
        args.split,
        indices.len(),
        report.dice(),
        report.iou()
    );
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        std::fs::write(out, csv).map_err(|e| CmdError::Usage(format!("{}: {e}", out.display())))?;
    }
    Ok(EXIT_OK)
}

fn cmd_predict(args: PredictArgs) -> Result<i32, CmdError> {
    let ckpt =
        load_checkpoint::<f32>(&args.checkpoint).map_err(|e| CmdError::Usage(e.to_string()))?;
    if !(0.0 < args.threshold && args.threshold < 1.0) {
        return Err(CmdError::Usage("threshold must lie in (0, 1)".into()));
    }
    let img = load_image_pgm(&args.image).map_err(|e| CmdError::Usage(e.to_string()))?;
    let edge = ckpt.params.config.input_hw.0;
    let img = resize_bilinear(&img, edge, edge).map_err(|e| CmdError::Usage(e.to_string()))?;
    let input = crate::Tensor::<f32>::from_vec(
        Shape::new(1, 1, edge, edge),
        img.data.clone(),
    );
    let (probs, traces) =
        forward_traced(&ckpt.params, &input).map_err(|e| CmdError::Usage(e.to_string()))?;
    let mask = binarize(probs.data(), args.threshold);
    let mask_img = GrayImage {
        w: edge,
        h: edge,
        data: mask.iter().map(|&m| f32::from(m)).collect(),
    };
    save_image_pgm(&mask_img, &args.out).map_err(|e| CmdError::Usage(e.to_string()))?;
    println!("mask: {}", args.out.display());

    if let Some(dir) = &args.heatmap_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CmdError::Usage(format!("{}: {e}", dir.display())))?;
        let mut written = 0;
        for (level, trace) in traces.iter().enumerate() {
            let maps: [(&str, Option<&crate::Tensor<f32>>); 3] = [
                ("cbam", trace.cbam_gate.as_ref()),
                ("dal", trace.dal_map.as_ref()),
                ("sal", trace.sal_map.as_ref()),
            ];
            for (branch, map) in maps {
                let Some(map) = map else { continue };
                let s = map.shape();
                let values: Vec<f64> = map.data().iter().map(|&v| f64::from(v)).collect();
                let path = dir.join(format!("level{level}_{branch}.pgm"));
                save_heatmap(&values, s.w(), s.h(), &path)
                    .map_err(|e| CmdError::Usage(e.to_string()))?;
                written += 1;
            }
        }
        println!("heatmaps: {written} files in {}", dir.display());
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, CmdError> {
    let settings = GradcheckSettings {
        levels: args.levels,
        base_channels: args.base_channels,
        input_edge: args.size,
        seed: args.seed,
        step: args.step,
        tolerance: args.tolerance,
        corrupt_group: args.corrupt_group.clone(),
    };
    let report = gradcheck(&settings).map_err(|e| CmdError::Usage(e.to_string()))?;
    print!("{}", report.render());
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

fn cmd_synth(args: SynthArgs) -> Result<i32, CmdError> {
    if args.count == 0 {
        return Err(CmdError::Usage("--count must be at least 1".into()));
    }
    if args.edge < 16 {
        return Err(CmdError::Usage("--edge must be at least 16".into()));
    }
    let dataset = synth_dataset(args.count, args.seed, args.edge);
    save_dataset_dir(&dataset, &args.out).map_err(|e| CmdError::Usage(e.to_string()))?;
    println!(
        "wrote {} image/mask pairs ({}x{}) to {}",
        dataset.len(),
        args.edge,
        args.edge,
        args.out.display()
    );
    Ok(EXIT_OK)
}
