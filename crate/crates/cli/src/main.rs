mod commands;
mod config;
mod log;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tryon_core::model::Variant;
use tryon_core::pipeline::PipelineMode;

use crate::config::VideoFormat;

#[derive(Parser, Debug)]
#[command(name = "tryon", version, about = "Pose-guided video try-on on a toy diffusion transformer")]
struct Cli {
    /// Worker threads for the pipeline, training and metrics (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a randomly initialized frozen backbone checkpoint.
    Init(InitArgs),
    /// Write the synthetic stick-figure corpus.
    MakeToy(ToyArgs),
    /// Build triplets from source clips through the model clients.
    BuildDataset(BuildArgs),
    /// Train the adapters (or an ablation variant) on a triplet manifest.
    Train(TrainArgs),
    /// Animate a human image wearing the given garments along a pose sequence.
    Generate(GenerateArgs),
    /// Blend two garments with weight gamma.
    Interpolate(GenerateArgs),
    /// Score predictions against ground truth and render report tables.
    Evaluate(EvalArgs),
    /// Serve the stub model clients over HTTP.
    ServeStubs(ServeArgs),
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL list of source clips.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    mode: Option<PipelineMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Client config file.
    #[arg(long)]
    clients: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Backbone checkpoint written by `init`.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    human: Option<PathBuf>,
    /// Garment image; repeat for several garments.
    #[arg(long = "garment")]
    garments: Vec<PathBuf>,
    /// Pose JSON.
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<VideoFormat>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSONL of `{id, method, dataset, pred, truth}`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `table1`, `table2` or `ablation`.
    #[arg(long)]
    layout: Option<String>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    max_requests: Option<usize>,
}

fn main() -> ExitCode {
    log::init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::event("error", serde_json::json!({ "message": "invalid --workers", "exit_code": 2 }));
            return ExitCode::from(2);
        }
    }
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
    let result = match cli.command {
        Command::Init(a) => commands::init(a),
        Command::MakeToy(a) => commands::make_toy(a),
        Command::BuildDataset(a) => commands::build_dataset(a, workers),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a, false),
        Command::Interpolate(a) => commands::generate(a, true),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::ServeStubs(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            log::event("error", serde_json::json!({ "message": e.to_string(), "exit_code": code }));
            ExitCode::from(code as u8)
        }
    }
}
