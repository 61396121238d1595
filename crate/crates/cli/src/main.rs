//! `mneme`: train, sample from and evaluate entity-memory language models.

mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mneme_core::model::Variant;

#[derive(Parser)]
#[command(name = "mneme", version, about = "Entity-memory language model workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an annotated JSONL corpus.
    Train(TrainArgs),
    /// Sample stories for entity prompts.
    Generate(GenerateArgs),
    /// Compute coherence, consistency and matching metrics.
    Analyze(AnalyzeArgs),
    /// Teacher-forced perplexity and entity-mention uncertainty.
    EvalLm(EvalArgs),
    /// Cache-size sweep reporting entity-mention NLL degradation.
    Degradation(DegradationArgs),
    /// Write a synthetic corpus and its ground-truth metrics.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat JSON with training and model fields.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path; the loss trace goes next to it as `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    cache_size: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL of annotated stories or of `{prompt_id, entities}` records.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON generation config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nucleus_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Argmax decoding.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Annotated JSONL or generation output JSONL.
    #[arg(long)]
    stories: PathBuf,
    /// Annotated corpus holding the gold prompts, matched by story id.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Report path; JSON, with CSV tables written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    sections: usize,
    #[arg(long, default_value_t = 3)]
    protagonists: usize,
    /// Also score the stories with this model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cache size used for scoring; defaults to the trained one.
    #[arg(long)]
    cache_size: Option<usize>,
    #[arg(long, default_value_t = 10)]
    sections: usize,
}

#[derive(Args)]
struct DegradationArgs {
    /// Experiment plan JSON: trains every variant and seed, then sweeps.
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    /// Sweep existing checkpoints instead (repeatable).
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Evaluation corpus for checkpoint mode.
    #[arg(long, requires = "checkpoint")]
    corpus: Option<PathBuf>,
    /// Sweep values for checkpoint mode (repeatable).
    #[arg(long)]
    cache_size: Vec<usize>,
    #[arg(long)]
    sections: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write `chart.svg`.
    #[arg(long)]
    chart: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth metrics JSON; defaults to `<out>.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::EvalLm(a) => commands::eval_lm(a),
        Command::Degradation(a) => commands::degradation(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
