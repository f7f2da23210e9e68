//! `pvseg`: generate data, pretrain, train, evaluate, infer and inspect.

mod commands;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pvseg_core::{Error, FuseMode, Split};

#[derive(Parser, Debug)]
#[command(name = "pvseg", version, about = "Solar-panel segmentation of aerial tiles")]
struct Cli {
    /// Worker threads. Computation is single-threaded, so every value gives
    /// identical results.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render synthetic aerial scenes with exact panel masks.
    GenData {
        /// Scene spec file (`key=value`; may be empty for defaults).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-distillation pretraining of the backbone.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Records to pretrain on.
        #[arg(long, value_enum, default_value_t = FoldArg::Train)]
        fold: FoldArg,
        /// CSV log (default: `--out` with a `.csv` extension).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Supervised segmentation training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pretraining checkpoint whose backbone initializes the model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV log (default: `--out` with a `.csv` extension).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a model on one fold and write a JSON report.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = FoldArg::Test)]
        fold: FoldArg,
        /// Report path (default: next to the model, `<model>.<fold>.json`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = FuseArg::Normalized)]
        fuse: FuseArg,
        /// Score the ground truth against itself instead of a model.
        #[arg(long, conflicts_with = "model")]
        oracle: bool,
    },
    /// Segment one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Binary mask (PGM, 0/255).
        #[arg(long)]
        out: PathBuf,
        /// Probability map (PGM, 0..255).
        #[arg(long)]
        prob: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = FuseArg::Normalized)]
        fuse: FuseArg,
    },
    /// List the tensors of a checkpoint.
    Inspect { checkpoint: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FoldArg {
    Train,
    Test,
    Val,
    All,
}

impl FoldArg {
    fn split(self) -> Option<Split> {
        match self {
            FoldArg::Train => Some(Split::Train),
            FoldArg::Test => Some(Split::Test),
            FoldArg::Val => Some(Split::Val),
            FoldArg::All => None,
        }
    }

    fn name(self) -> &'static str {
        self.split().map_or("all", Split::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FuseArg {
    Normalized,
    Literal,
}

impl From<FuseArg> for FuseMode {
    fn from(f: FuseArg) -> Self {
        match f {
            FuseArg::Normalized => FuseMode::Normalized,
            FuseArg::Literal => FuseMode::Literal,
        }
    }
}

/// Process exit status for a failed command.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_) | Error::Config(_)) => 2,
        Some(Error::NonFinite(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, seed, n, out } => commands::gen_data(&spec, seed, n, &out),
        Command::Pretrain { config, data, out, fold, log } => commands::pretrain(&config, &data, &out, fold.split(), log),
        Command::Train { config, data, init, out, log } => commands::train(&config, &data, init.as_deref(), &out, log),
        Command::Eval { model, data, fold, out, threshold, fuse, oracle } => {
            commands::eval(model.as_deref(), &data, fold.split(), fold.name(), out, threshold, fuse.into(), oracle)
        }
        Command::Infer { model, image, out, prob, threshold, fuse } => {
            commands::infer(&model, &image, &out, prob.as_deref(), threshold, fuse.into())
        }
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
