use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use policyeval::config::ExperimentConfig;
use policyeval::inference::DecodeMode;
use policyeval::pipeline::{Pipeline, PipelineOptions, RunRequest, Stage, StageOutcome};
use policyeval::prompts::PromptVariant;
use tracing_subscriber::EnvFilter;

/// Evaluate LLM hate-speech classifiers against an in-context policy and
/// analyse how their explanations diverge.
#[derive(Parser, Debug)]
#[command(name = "policyeval", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the output root directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the corpus and snapshot it into the experiment directory.
    Ingest,
    /// Query the endpoints; resumes where a previous run stopped.
    Run(RunArgs),
    /// Classify every stored response and tabulate invalid rates.
    Parse,
    /// Score each (model, variant, decode) cell and the prompt transitions.
    Evaluate,
    /// F1 deltas of each ablated prompt against the full guided prompt.
    Ablate,
    /// Embed the responses used for divergence analysis.
    Embed,
    /// Reduce embeddings and compute cross- and intra-model distances.
    Diverge,
    /// Cohesion scores and KS tests per model.
    Significance,
    /// Assemble the text report from stage artifacts.
    Report,
    /// Every stage in order.
    All,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run a single cell for this roster model instead of the full sweep.
    #[arg(long)]
    model: Option<String>,
    /// Prompt variant, e.g. zs-beta, guided-cot, ablation:a3.
    #[arg(long, requires = "model")]
    prompt: Option<PromptVariant>,
    #[arg(long, value_parser = ["greedy", "sample", "sc"], requires = "model")]
    decode: Option<String>,
    #[arg(long, requires = "model")]
    runs: Option<u32>,
    #[arg(long = "max-tokens", requires = "model")]
    max_tokens: Option<u32>,
    #[arg(long)]
    parallel: Option<usize>,
    /// Run store to append to (defaults to the experiment's store).
    #[arg(long, value_name = "FILE", requires = "model")]
    out: Option<PathBuf>,
    /// Stop after issuing this many requests.
    #[arg(long)]
    limit: Option<usize>,
}

fn print_outcome(o: &StageOutcome) {
    println!("[{}] {}", o.stage, o.summary);
    for a in &o.artifacts {
        println!("  {}", a.display());
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = std::env::current_dir().context("resolving --out")?.join(out);
    }
    cfg.validate()?;

    let stage = match cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Parse => Stage::Parse,
        Command::Evaluate => Stage::Evaluate,
        Command::Ablate => Stage::Ablate,
        Command::Embed => Stage::Embed,
        Command::Diverge => Stage::Diverge,
        Command::Significance => Stage::Significance,
        Command::Report => Stage::Report,
        Command::All => {
            for o in Pipeline::new(cfg).run_all()? {
                print_outcome(&o);
            }
            return Ok(());
        }
        Command::Run(args) => {
            let mut pipeline = Pipeline::new(cfg);
            let outcome = match args.model {
                Some(model) => {
                    let (Some(variant), Some(decode)) = (args.prompt, args.decode) else {
                        bail!("--model needs --prompt and --decode");
                    };
                    pipeline.run_cell(&RunRequest {
                        model,
                        variant,
                        decode: decode.parse::<DecodeMode>()?,
                        num_runs: args.runs,
                        max_tokens: args.max_tokens,
                        parallel: args.parallel,
                        store: args.out,
                        limit: args.limit,
                    })?
                }
                None => {
                    if let Some(p) = args.parallel {
                        let mut cfg = pipeline.config().clone();
                        cfg.run.parallel = p;
                        pipeline = Pipeline::new(cfg);
                    }
                    pipeline.with_options(PipelineOptions { run_limit: args.limit }).run()?
                }
            };
            print_outcome(&outcome);
            return Ok(());
        }
    };
    print_outcome(&Pipeline::new(cfg).run_stage(stage)?);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
