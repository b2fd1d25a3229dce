//! `kdiag`: synthetic worlds, knowledge-encoder and classifier training,
//! dataset assembly, evaluation and attention maps, all as batch commands
//! over files.

mod commands;
mod config;
mod imageio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kdiag_core::model::Mode;
use kdiag_core::Error;

#[derive(Parser, Debug)]
#[command(name = "kdiag", version, about = "Knowledge-enhanced multi-label classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed; falls back to the config file, then to KDIAG_SEED
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a concept catalog, rendered images and manifests
    Synth(SynthArgs),
    /// Train and freeze the knowledge encoder on a catalog
    TrainKe(TrainKeArgs),
    /// Train a classifier on one or more manifests
    Train(TrainArgs),
    /// Evaluate a classifier on its own classes
    Eval(EvalArgs),
    /// Evaluate classes that were absent from training
    Zeroshot(ZeroshotArgs),
    /// Merge manifests under a union vocabulary
    Assemble(AssembleArgs),
    /// Cross-attention heatmap for one image and class
    Attn(AttnArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Rendered classes, unseen ones included
    #[arg(long, default_value_t = 16)]
    pub classes: usize,
    /// Classes whose labels are withheld from every training manifest
    #[arg(long, default_value_t = 0)]
    pub unseen: usize,
    /// Attribute count; defaults to 12, or to one more than the seen
    /// classes (at least 4) when that is smaller and --unseen is set
    #[arg(long)]
    pub attributes: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Training manifests, each labeling a disjoint subset of seen classes
    #[arg(long, default_value_t = 3)]
    pub manifests: usize,
    /// Knowledge-only concepts appended to the catalog
    #[arg(long, default_value_t = 240)]
    pub knowledge_extra: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainKeArgs {
    #[arg(long)]
    pub catalog: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Frozen knowledge encoder directory (modes ke and ke_lp)
    #[arg(long)]
    pub ke: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub prompt_count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct EvalFlags {
    /// Bootstrap resamples per class (0 disables intervals)
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub min_cases: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub ke: Option<PathBuf>,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub ke: Option<PathBuf>,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Comma-separated class names absent from training
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AssembleArgs {
    /// Source manifests (the pool when --target is given)
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Target manifest; writes the separation, plus_diversity and
    /// plus_diversity_amount training arms
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Train/val/test ratios, e.g. 0.7,0.1,0.2
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub ke: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long = "class")]
    pub class: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixel size of one heatmap cell in the image output
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[command(flatten)]
    pub common: Common,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Protocol(_) | Error::Parameter(_) => 2,
        Error::Divergence { .. } | Error::Degenerate(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::TrainKe(a) => commands::train_ke(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Zeroshot(a) => commands::zeroshot(&a),
        Command::Assemble(a) => commands::assemble(&a),
        Command::Attn(a) => commands::attn(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
