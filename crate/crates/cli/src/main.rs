use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contrastive_embed::config::{parse_override, RunConfig};
use contrastive_embed::Error;

mod commands;

/// Contrastive text/code embeddings: training, indexing and evaluation.
#[derive(Debug, Parser)]
#[command(name = "cembed", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true, env = "CEMBED_CONFIG")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch_size=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration to stdout and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder on JSONL pairs and write a checkpoint.
    Train(commands::TrainArgs),
    /// Embed JSONL texts to a raw float32 matrix plus a JSON manifest.
    Embed(commands::EmbedArgs),
    /// Embed a corpus (y side) and build a search index.
    Index(commands::IndexArgs),
    /// Query an index with one text (x side).
    Search(commands::SearchArgs),
    /// Linear-probe accuracy on labeled texts.
    EvalProbe(commands::ProbeArgs),
    /// k-NN classification accuracy on labeled texts.
    EvalKnn(commands::KnnArgs),
    /// Zero-shot classification accuracy against label descriptions.
    EvalZeroshot(commands::ZeroShotArgs),
    /// MRR, recall and nDCG over a corpus / queries / qrels triple.
    EvalRetrieval(commands::RetrievalArgs),
    /// Spearman correlation on sentence-similarity pairs.
    EvalSts(commands::StsArgs),
    /// Compare batch sizes at an equal number of training pairs.
    AblateBatch(commands::AblateArgs),
    /// Extract (docstring, code) pairs from Python and JavaScript sources.
    MinePairs(commands::MineArgs),
    /// Evaluate a series of checkpoints and write a CSV time series.
    Track(commands::TrackArgs),
}

/// Exit code 1 for usage/config problems, 2 for data and format problems.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_) | Error::Config(_)) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let overrides = cli
        .global
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut config = RunConfig::load(cli.global.config.as_deref(), &overrides)?;
    commands::apply_flag_overrides(&cli.command, &mut config)?;
    if cli.global.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    config.validate_paths()?;
    match cli.command {
        Command::Train(a) => commands::train(&a, &config),
        Command::Embed(a) => commands::embed(&a),
        Command::Index(a) => commands::index(&a, &config),
        Command::Search(a) => commands::search(&a),
        Command::EvalProbe(a) => commands::eval_probe(&a, &config),
        Command::EvalKnn(a) => commands::eval_knn(&a, &config),
        Command::EvalZeroshot(a) => commands::eval_zeroshot(&a, &config),
        Command::EvalRetrieval(a) => commands::eval_retrieval(&a, &config),
        Command::EvalSts(a) => commands::eval_sts(&a),
        Command::AblateBatch(a) => commands::ablate(&a, &config),
        Command::MinePairs(a) => commands::mine(&a),
        Command::Track(a) => commands::track(&a, &config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
