//! `spkdistill`: synthetic data generation, teacher and student training,
//! start-point fine-tuning and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
//! error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "spkdistill",
    version,
    about = "Teacher-student distillation and start-point fine-tuning for speaker verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; defaults are used for anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for this stage.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Cosine,
    Plda,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source, target fine-tuning and target evaluation corpora plus a trial list.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the teacher on whole long source utterances.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the student from a teacher on random short crops.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Teacher model file.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Fine-tune a model on the target fine-tuning corpus.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Start-point model file.
        #[arg(long)]
        model: PathBuf,
    },
    /// Score the target trial list and report the EER.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Overrides the configured scoring back-end.
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Skip LDA (identity projection).
        #[arg(long)]
        skip_lda: bool,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::TrainTeacher { common, data } => commands::train_teacher(&common, &data),
        Command::TrainStudent { common, data, teacher } => commands::train_student(&common, &data, &teacher),
        Command::Finetune { common, data, model } => commands::finetune(&common, &data, &model),
        Command::Evaluate { common, data, model, backend, skip_lda } => {
            commands::evaluate(&common, &data, &model, backend, skip_lda)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
