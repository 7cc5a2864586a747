//! `qzlora`: run pipeline stages, register topics, and act as the offline
//! stub trainer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qzlora_core::corpus::{register_topic, Category, Topic};
use qzlora_core::digest::write_json_atomic;
use qzlora_core::pipeline::{Pipeline, PipelineConfig, PipelineError, RunOptions, Stage, StageSummary};
use qzlora_core::train::{stub_train, TrainingManifest};

const EXIT_CONFIG: u8 = 2;
const EXIT_UPSTREAM: u8 = 3;
const EXIT_UNITS: u8 = 4;

#[derive(Parser)]
#[command(name = "qzlora", version, about = "Quiz-ranked image selection for LoRA fine-tuning")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, default_value = "qzlora.toml")]
    config: PathBuf,
    /// Comma-separated topic ids; all registered topics by default.
    #[arg(long, value_delimiter = ',')]
    topics: Option<Vec<String>>,
    /// Render train and generate work without running it.
    #[arg(long)]
    dry_run: bool,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config store root.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Overrides the config parallelism.
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Download candidate images for each topic.
    Ingest(RunArgs),
    /// Generate the multiple-choice quiz for each topic.
    Quiz(RunArgs),
    /// Score every candidate image with the vision model.
    Score(RunArgs),
    /// Materialize top-k and random-k selections.
    Select(RunArgs),
    /// Emit training datasets and manifests.
    Manifest(RunArgs),
    /// Run the trainer command for each LoRA condition.
    Train(RunArgs),
    /// Generate sample images for each condition.
    Generate(RunArgs),
    /// Score generated images and per-condition accuracies.
    Evaluate(RunArgs),
    /// Compute statistics and write the report tables.
    Report(RunArgs),
    /// Every stage in order, resuming from saved state.
    RunAll(RunArgs),
    /// Show per-unit status.
    Status(RunArgs),
    /// Add a topic to a registry file.
    Register(RegisterArgs),
    /// Offline trainer honoring the trainer command contract.
    #[command(hide = true)]
    StubTrain(StubTrainArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long)]
    url: String,
    #[arg(long)]
    summary: String,
    /// Biology, Architecture, FoodAndDrink or Art.
    #[arg(long)]
    category: String,
    #[arg(long)]
    monthly_views: u64,
    #[arg(long = "distractor")]
    distractors: Vec<String>,
}

#[derive(Args)]
struct StubTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

enum Failure {
    Config(String),
    Upstream(String),
    Units(String),
    Other(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.to_string()),
            PipelineError::UpstreamIncomplete { .. } => Failure::Upstream(e.to_string()),
            PipelineError::UnitFailures { .. } => Failure::Units(e.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_pipeline(args: &RunArgs) -> Result<Pipeline, Failure> {
    let mut cfg = PipelineConfig::load(&args.config).map_err(|e| Failure::Config(e.0))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(store) = &args.store {
        cfg.store_root = std::path::absolute(store).map_err(|e| Failure::Config(e.to_string()))?;
    }
    if let Some(p) = args.parallelism {
        cfg.parallelism = p;
    }
    let exe = std::env::current_exe().context("locating the qzlora binary")?;
    Ok(Pipeline::from_config(cfg)?.with_self_exe(exe))
}

fn options(args: &RunArgs) -> RunOptions {
    RunOptions {
        topics: args.topics.clone(),
        dry_run: args.dry_run,
    }
}

fn print_summary(s: &StageSummary) {
    let stage = s.stage.map(|s| s.to_string()).unwrap_or_default();
    println!(
        "{stage}: {} run, {} skipped, {} pending, {} failed",
        s.executed.len(),
        s.skipped.len(),
        s.pending.len(),
        s.failed.len()
    );
    for (key, note) in &s.pending {
        println!("  pending {key}: {note}");
    }
    for (key, reason) in &s.failed {
        println!("  failed {key}: {reason}");
    }
}

fn run_stage(stage: Stage, args: &RunArgs) -> Result<(), Failure> {
    let p = load_pipeline(args)?;
    let summary = p.run_stage(stage, &options(args))?;
    print_summary(&summary);
    summary.into_result()?;
    Ok(())
}

fn run_all(args: &RunArgs) -> Result<(), Failure> {
    let p = load_pipeline(args)?;
    let opts = options(args);
    for stage in Stage::ALL {
        let summary = p.run_stage(stage, &opts)?;
        print_summary(&summary);
        let stop = !summary.pending.is_empty();
        summary.into_result()?;
        if stop {
            println!("dry run: stopping after {stage}");
            break;
        }
    }
    Ok(())
}

fn status(args: &RunArgs) -> Result<(), Failure> {
    let p = load_pipeline(args)?;
    let state = p.state();
    println!("run {}", state.run_id);
    for (key, rec) in &state.units {
        let status = serde_json::to_value(&rec.status).map_err(anyhow::Error::from)?;
        let label = status["status"].as_str().unwrap_or("?").to_string();
        match status.get("reason").and_then(|r| r.as_str()) {
            Some(reason) => println!("{label:8} {key}: {reason}"),
            None => println!("{label:8} {key}"),
        }
    }
    Ok(())
}

fn register(args: &RegisterArgs) -> Result<(), Failure> {
    let category: Category = serde_json::from_value(serde_json::Value::String(args.category.clone()))
        .map_err(|_| Failure::Config(format!("unknown category {:?}", args.category)))?;
    let topic = Topic {
        topic_id: args.id.clone(),
        wiki_url: args.url.clone(),
        summary_sentence: args.summary.clone(),
        category,
        monthly_views: args.monthly_views,
        distractor_ids: args.distractors.clone(),
    };
    let t = register_topic(&args.registry, topic).map_err(|e| Failure::Config(e.to_string()))?;
    println!("registered {}", t.topic_id);
    Ok(())
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn stub_train_cmd(args: &StubTrainArgs) -> Result<(), Failure> {
    let manifest = TrainingManifest::load(&args.manifest).map_err(|e| Failure::Config(e.to_string()))?;
    if !same_path(&args.dataset, &manifest.dataset_dir) {
        return Err(Failure::Config(format!(
            "--dataset {} does not match manifest dataset_dir {}",
            args.dataset.display(),
            manifest.dataset_dir.display()
        )));
    }
    if args.output != manifest.output_model_path {
        return Err(Failure::Config(format!(
            "--output {} does not match manifest output_model_path {}",
            args.output.display(),
            manifest.output_model_path.display()
        )));
    }
    let model = stub_train(&manifest).map_err(|e| Failure::Other(e.into()))?;
    let meta = serde_json::json!({
        "trainer": "qzlora stub-train",
        "image_count": model.image_count,
    });
    let meta_path = PathBuf::from(format!("{}.meta.json", args.output.display()));
    write_json_atomic(&meta_path, &meta).context("writing trainer metadata")?;
    println!("wrote {} ({} images)", args.output.display(), model.image_count);
    Ok(())
}

fn dispatch(cmd: &Command) -> Result<(), Failure> {
    match cmd {
        Command::Ingest(a) => run_stage(Stage::Ingest, a),
        Command::Quiz(a) => run_stage(Stage::Quiz, a),
        Command::Score(a) => run_stage(Stage::Score, a),
        Command::Select(a) => run_stage(Stage::Select, a),
        Command::Manifest(a) => run_stage(Stage::Manifest, a),
        Command::Train(a) => run_stage(Stage::Train, a),
        Command::Generate(a) => run_stage(Stage::Generate, a),
        Command::Evaluate(a) => run_stage(Stage::Evaluate, a),
        Command::Report(a) => run_stage(Stage::Report, a),
        Command::RunAll(a) => run_all(a),
        Command::Status(a) => status(a),
        Command::Register(a) => register(a),
        Command::StubTrain(a) => stub_train_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Config(m) => (EXIT_CONFIG, format!("configuration error: {m}")),
                Failure::Upstream(m) => (EXIT_UPSTREAM, m),
                Failure::Units(m) => (EXIT_UNITS, m),
                Failure::Other(e) => (1, format!("{e:#}")),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
