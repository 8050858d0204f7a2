//! `vistrans` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vistrans", version, about = "In-image translation: synthesis, training, inference, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (flat `key = value` text with sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Target language code, e.g. `de`.
    #[arg(long, global = true)]
    pub lang: Option<String>,
    /// Base preset: `tiny` or `paper`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    Synth {
        /// Number of examples; defaults to `data.count`.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the background, code and translation branches.
    #[command(name = "train-stage1")]
    TrainStage1 {
        /// Training manifest; defaults to `data.train`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the character and code decoders on a stage-1 checkpoint.
    #[command(name = "train-stage2")]
    TrainStage2 {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Translate one source image.
    Translate {
        /// Source PNG on the model canvas.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a system (or the reference images) on a manifest.
    Evaluate {
        /// Evaluation manifest; defaults to `data.eval`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Recognizer checkpoint; trained and saved when absent.
        #[arg(long)]
        recognizer: Option<PathBuf>,
        /// Manifest used to train a recognizer; defaults to `data.train`.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// Score the reference target images instead of translations.
        #[arg(long)]
        golden: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the finite-difference suite over every operation and both objectives.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Print checkpoint metadata.
    Inspect {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
