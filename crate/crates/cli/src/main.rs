//! `sctransnet`: train, evaluate, infer, analyze and synthesize.
//!
//! Log verbosity follows `SCTRANSNET_LOG` (`error`, `warn`, `info`, `debug`);
//! the default is `info`.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::ModelSource;
use run_config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "sctransnet",
    version,
    about = "Infrared small target detection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, data order and synthetic scenes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Binarization threshold for metrics and masks.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `<data>/img_idx/train_<name>.txt`, validating on the test split.
    Train {
        /// Dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Report metrics on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score `<dir>/<id>.png` saliency maps instead of running a model.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Write saliency maps and masks for images or directories of images.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Parameter and FLOP counts, total and per module.
    Analyze,
    /// Generate a synthetic dataset.
    Synth,
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common.clone();
    let (mut rc, explicit) = RunConfig::load(common.config.as_deref())?;
    let source = ModelSource {
        explicit,
        threshold: common.threshold,
    };
    let mut o = Overrides {
        seed: common.seed,
        threshold: common.threshold,
        out: common.out,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Train { data, epochs } => {
            o.data = data.clone();
            o.epochs = *epochs;
        }
        Command::Eval {
            checkpoint, data, ..
        } => {
            o.data = data.clone();
            o.checkpoint = checkpoint.clone();
        }
        Command::Infer { checkpoint, .. } => o.checkpoint = checkpoint.clone(),
        Command::Analyze | Command::Synth => {}
    }
    rc.apply(&o);
    rc.validate()?;
    match &cli.command {
        Command::Train { .. } => commands::train(&rc),
        Command::Eval { pred_dir, .. } => commands::eval(&rc, pred_dir.as_deref(), source),
        Command::Infer { inputs, .. } => commands::infer(&rc, inputs, source),
        Command::Analyze => commands::analyze(&rc),
        Command::Synth => commands::synth(&rc),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCTRANSNET_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
