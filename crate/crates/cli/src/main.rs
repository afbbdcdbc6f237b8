//! `promptseg` command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "promptseg", version, about = "Prompt-attention cell image segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key=value` config file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Replays the settings of a run manifest.
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Master seed; falls back to PROMPTSEG_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation and kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overrides one config key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub prompt_size: Option<usize>,
    /// `row,col` or `center`.
    #[arg(long)]
    pub prompt_origin: Option<String>,
    #[arg(long)]
    pub init_weights: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataFlags {
    /// Dataset directory of `<id>.img.pgm` / `<id>.lbl.pgm` pairs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Cross-validation fold (0, 1 or 2).
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    A,
    B,
}

impl FamilyArg {
    pub fn key(self) -> &'static str {
        match self {
            FamilyArg::A => "a",
            FamilyArg::B => "b",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Prompted when a prompt is available, plain otherwise.
    Auto,
    Plain,
    Prompted,
}

impl ModeArg {
    pub fn key(self) -> &'static str {
        match self {
            ModeArg::Auto => "auto",
            ModeArg::Plain => "plain",
            ModeArg::Prompted => "prompted",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a synthetic membrane dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of images [default: 12].
        #[arg(long)]
        count: Option<usize>,
        /// Image side length [default: 64].
        #[arg(long)]
        size: Option<usize>,
        /// Generator family [default: a].
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
    },
    /// Supervised training on one or more fully labeled datasets.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated dataset directories.
        #[arg(long)]
        data: Option<String>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// One-shot prompt-attention training on one image of a fold.
    TrainOneshot {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Training image id (default: first training id of the fold).
        #[arg(long)]
        train_id: Option<String>,
        /// Prompt source id (default: second training id of the fold).
        #[arg(long)]
        prompt_id: Option<String>,
    },
    /// Writes predicted masks for every image of a dataset.
    Infer {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        /// Inference mode [default: auto].
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Prompt directory (default: `prompt/` beside the weights).
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Stage 1, pseudo-label generation and stage 2 on rectangle-only labels.
    TrainPartial {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Dice report of a trained model.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        /// Inference mode [default: auto].
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Re-runs one-shot training over a temperature list and all folds.
    SweepTau {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Comma-separated temperatures.
        #[arg(long)]
        taus: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainOneshot { .. } => "train-oneshot",
            Command::Infer { .. } => "infer",
            Command::TrainPartial { .. } => "train-partial",
            Command::Eval { .. } => "eval",
            Command::SweepTau { .. } => "sweep-tau",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
