//! Command-line front end: dataset generation, training, evaluation,
//! explanations and ablations.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qcmhm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "qcmhm", version, about = "Temporal KG question answering toolkit")]
pub struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true, env = "QCMHM_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic fact file and train/dev/test question files.
    Generate(GenerateArgs),
    /// Train KG embeddings on a fact file.
    TrainKg(TrainKgArgs),
    /// Train the question answering model on top of KG embeddings.
    TrainQa(TrainQaArgs),
    /// Evaluate a trained model on a question file.
    Eval(EvalArgs),
    /// Reasoning paths and fact attributions for questions.
    Explain(ExplainArgs),
    /// Train the full model and its three ablations on one synthetic dataset.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Default)]
pub struct WorldFlags {
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    #[arg(long)]
    pub first_year: Option<i32>,
    #[arg(long)]
    pub last_year: Option<i32>,
    #[arg(long)]
    pub facts_per_entity: Option<usize>,
    #[arg(long)]
    pub questions_per_category: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct KgFlags {
    /// Complex embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Weight of the time-order objective; 0 disables it.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub kg_epochs: Option<usize>,
    #[arg(long)]
    pub kg_lr: Option<f64>,
    /// Use the margin ranking loss with this margin instead of cross-entropy.
    #[arg(long)]
    pub margin: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct QaFlags {
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Diffusion distance of the graph layers.
    #[arg(long)]
    pub aleph: Option<usize>,
    #[arg(long)]
    pub gnn_layers: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub no_calibration: bool,
    #[arg(long)]
    pub unfreeze_kg: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub world: WorldFlags,
}

#[derive(Args, Debug)]
pub struct TrainKgArgs {
    /// Tab-separated fact file.
    #[arg(long)]
    pub facts: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub kg: KgFlags,
}

#[derive(Args, Debug)]
pub struct TrainQaArgs {
    #[arg(long)]
    pub facts: PathBuf,
    /// Training questions (JSON lines).
    #[arg(long)]
    pub train: PathBuf,
    /// KG embedding checkpoint from `train-kg`.
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional questions evaluated after training.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[command(flatten)]
    pub qa: QaFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub facts: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    /// QA checkpoint from `train-qa`.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory for the Markdown, JSON and SVG reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub facts: PathBuf,
    #[arg(long)]
    pub questions: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Explain only the question at this 0-based line.
    #[arg(long)]
    pub index: Option<usize>,
    /// JSON file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub world: WorldFlags,
    #[command(flatten)]
    pub kg: KgFlags,
    #[command(flatten)]
    pub qa: QaFlags,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => NUMERIC,
        Some(Error::Config(_)) | Some(Error::Unavailable(_)) => USAGE,
        Some(_) => DATA,
        None if err.downcast_ref::<std::io::Error>().is_some() => DATA,
        None if err.downcast_ref::<serde_json::Error>().is_some() => DATA,
        None => USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
