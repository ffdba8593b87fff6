//! `s3l`: pretrain, fine-tune, evaluate and cost small self-supervised models.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime
//! failure.

mod commands;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "s3l", version, about = "Self-supervised pretraining at reduced resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured SSL curriculum, writing per-stage checkpoints.
    Pretrain(PretrainArgs),
    /// Fine-tune from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Train a linear classifier on frozen pretrained features.
    Lineval(LinevalArgs),
    /// Print per-resolution MACs and the plan-weighted mean as CSV.
    Flops(FlopsArgs),
    /// Collect finished runs into runs.csv and scatter.svg.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Continue from a checkpoint written by an earlier invocation.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs (a checkpoint is written so the run can resume).
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Pretraining checkpoint to start from.
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub random_init: bool,
    /// Re-initialize this stage and warm it up before fine-tuning.
    #[arg(long, requires = "from", conflicts_with = "removed_stage")]
    pub drop_stage: Option<String>,
    /// The checkpoint lacks the last stage; append a fresh one and warm it up.
    #[arg(long, requires = "from")]
    pub removed_stage: bool,
    /// Fine-tune with mixup regardless of the config.
    #[arg(long)]
    pub mixup: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LinevalArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub backbone: String,
    /// Comma-separated input resolutions.
    #[arg(long, value_delimiter = ',')]
    pub res: Vec<usize>,
    /// Curriculum such as `112:800,224:200`.
    #[arg(long)]
    pub plan: Option<String>,
    /// `layer-ops` (default) or `macs` (convolutions and linear layers only).
    #[arg(long, default_value = "layer-ops")]
    pub count: String,
    /// Classifier outputs included in the count.
    #[arg(long, default_value_t = 1000)]
    pub classes: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory searched recursively for `report.json` files.
    #[arg(long)]
    pub dir: PathBuf,
    /// Where to write runs.csv and scatter.svg (defaults to `--dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Lineval(a) => commands::lineval(&a),
        Command::Flops(a) => commands::flops(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
