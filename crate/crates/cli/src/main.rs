//! `tsnca`: two-stage low-light image enhancement with channel attention.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use tsnca_cli::checkpoint::Checkpoint;
use tsnca_cli::config::{parse_config_file, TrainConfig};
use tsnca_cli::dataset::DatasetIndex;
use tsnca_cli::error::Error;
use tsnca_cli::{imageio, pipeline, train};

#[derive(Parser)]
#[command(
    name = "tsnca",
    version,
    about = "Two-stage low-light image enhancement (TSN-CA)"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the stage-one HSV value-channel enhancer.
    TrainStage1(TrainArgs),
    /// Train the stage-two RGB restorer against a frozen stage-one model.
    TrainStage2(TrainStage2Args),
    /// Enhance one image through both stages.
    Enhance(EnhanceArgs),
    /// Score a directory of predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Print the contents of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory of low-light input images.
    #[arg(long)]
    low: PathBuf,
    /// Directory of normal-light ground-truth images (same file names).
    #[arg(long)]
    high: PathBuf,
}

#[derive(Args)]
struct TrainFlags {
    /// Flat key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Training batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Square random-crop size (must be divisible by 2^depth).
    #[arg(long)]
    crop: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed for parameter init and crop sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Channel width of the first U-Net level.
    #[arg(long = "base-channels")]
    base_channels: Option<usize>,
    /// Number of down/up-sampling levels.
    #[arg(long)]
    depth: Option<usize>,
    /// Where to write the per-step loss CSV.
    #[arg(long = "loss-log")]
    loss_log: Option<PathBuf>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<(), Error> {
        if let Some(path) = &self.config {
            cfg.apply_file_entries(&parse_config_file(path)?)?;
        }
        if let Some(v) = self.steps {
            cfg.max_steps = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.crop {
            cfg.crop_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.base_channels {
            cfg.base_channels = v;
        }
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Feed V replicated three times instead of [H, S, V] (ablation).
    #[arg(long = "no-hs-input", action = ArgAction::SetTrue)]
    no_hs_input: bool,
    /// Add a negated SSIM term to the stage-one loss (ablation).
    #[arg(long = "ssim-loss-stage1", action = ArgAction::SetTrue)]
    ssim_loss_stage1: bool,
    /// Feature-extractor weights in VGG16 layout (tensor container file).
    #[arg(long = "vgg-weights")]
    vgg_weights: Option<PathBuf>,
    /// Extractor tap index within the VGG16 feature stack.
    #[arg(long = "vgg-tap")]
    vgg_tap: Option<usize>,
}

#[derive(Args)]
struct TrainStage2Args {
    #[command(flatten)]
    data: DataArgs,
    /// Trained stage-one checkpoint (frozen during stage two).
    #[arg(long)]
    stage1: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Disable channel attention in the restorer skip connections (the
    /// TSN ablation arm; the default is TSN-CA).
    #[arg(long = "no-ca", action = ArgAction::SetTrue)]
    no_ca: bool,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Low-light input image.
    #[arg(long)]
    input: PathBuf,
    /// Output image path.
    #[arg(long)]
    output: PathBuf,
    /// Stage-one (enhancer) checkpoint.
    #[arg(long)]
    stage1: PathBuf,
    /// Stage-two (restorer) checkpoint.
    #[arg(long)]
    stage2: PathBuf,
    /// Also write the enhanced V plane and the stage-two input next to the
    /// output.
    #[arg(long = "dump-intermediates", action = ArgAction::SetTrue)]
    dump_intermediates: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predictions.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth images.
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the CSV report (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint path.
    path: PathBuf,
}

fn warn_unmatched(index: &DatasetIndex) {
    for name in &index.unmatched_low {
        eprintln!("warning: {name} has no high counterpart; skipped");
    }
    for name in &index.unmatched_high {
        eprintln!("warning: {name} has no low counterpart; skipped");
    }
}

fn write_outputs(
    outcome: &train::TrainOutcome,
    out: &std::path::Path,
    loss_log: &Option<PathBuf>,
) -> Result<(), Error> {
    outcome.checkpoint.save(out)?;
    if let Some(path) = loss_log {
        std::fs::write(path, outcome.log.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::TrainStage1(args) => {
            let mut cfg = TrainConfig::stage1();
            args.flags.apply(&mut cfg)?;
            if args.no_hs_input {
                cfg.use_hs_input = false;
            }
            if args.ssim_loss_stage1 {
                cfg.use_ssim_loss_stage1 = true;
            }
            if args.vgg_weights.is_some() {
                cfg.vgg_weights = args.vgg_weights;
            }
            if args.vgg_tap.is_some() {
                cfg.vgg_tap = args.vgg_tap;
            }
            let index = DatasetIndex::scan(&args.data.low, &args.data.high)?;
            warn_unmatched(&index);
            let outcome = train::train_stage1(&index, &cfg)?;
            write_outputs(&outcome, &args.out, &args.flags.loss_log)?;
            if let Some(row) = outcome.log.rows.last() {
                println!("stage1 done: step {} total {}", row.step, row.total);
            }
            println!("checkpoint written to {}", args.out.display());
        }
        Command::TrainStage2(args) => {
            let mut cfg = TrainConfig::stage2();
            args.flags.apply(&mut cfg)?;
            if args.no_ca {
                cfg.with_channel_attention = false;
            }
            let index = DatasetIndex::scan(&args.data.low, &args.data.high)?;
            warn_unmatched(&index);
            let stage1 = Checkpoint::load(&args.stage1)?;
            let outcome = train::train_stage2(&index, &stage1, &cfg)?;
            write_outputs(&outcome, &args.out, &args.flags.loss_log)?;
            if let Some(row) = outcome.log.rows.last() {
                println!("stage2 done: step {} total {}", row.step, row.total);
            }
            println!("checkpoint written to {}", args.out.display());
        }
        Command::Enhance(args) => {
            let low = imageio::load_rgb(&args.input)?;
            let stage1 = Checkpoint::load(&args.stage1)?;
            let stage2 = Checkpoint::load(&args.stage2)?;
            let result = pipeline::enhance_image(&low, &stage1, &stage2)?;
            imageio::save_rgb(&args.output, &result.output)?;
            if args.dump_intermediates {
                let stem = args.output.with_extension("");
                let v_path = PathBuf::from(format!("{}.v.png", stem.display()));
                let mid_path = PathBuf::from(format!("{}.stage1.png", stem.display()));
                imageio::save_gray(&v_path, &result.enhanced_v)?;
                imageio::save_rgb(&mid_path, &result.intermediate)?;
                println!(
                    "intermediates written to {} and {}",
                    v_path.display(),
                    mid_path.display()
                );
            }
            println!("enhanced image written to {}", args.output.display());
        }
        Command::Evaluate(args) => {
            let outcome = pipeline::evaluate_dirs(&args.pred, &args.gt)?;
            let csv = pipeline::evaluation_csv(&outcome);
            match args.report {
                Some(path) => {
                    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
                    println!("report written to {}", path.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::InspectCheckpoint(args) => {
            let ckpt = Checkpoint::load(&args.path)?;
            println!("fingerprint: {}", ckpt.fingerprint);
            println!("training step: {}", ckpt.step);
            println!("tensors: {}", ckpt.tensors.len());
            for (name, tensor) in &ckpt.tensors {
                println!("  {name} {:?}", tensor.shape());
            }
            match &ckpt.optimizer {
                Some(table) => println!("optimizer entries: {}", table.len()),
                None => println!("optimizer entries: none"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
