mod commands;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "conceptstack",
    version,
    about = "Train, score and inspect the stacked concept-graph ensemble"
)]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-validate, refit on all rows and save the artifact and reports.
    Train(TrainArgs),
    /// Score a CSV with a saved artifact.
    Predict(PredictArgs),
    /// Score a labelled CSV and print metrics for every model.
    Evaluate(EvaluateArgs),
    /// Write the per-fold concept graphs as DOT files.
    ExportGraph(ExportArgs),
    /// Write the figure data stored in an artifact.
    Report(ExportArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Epochs for every gradient-trained network.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    #[arg(long)]
    pub gmm_components: Option<usize>,
    #[arg(long)]
    pub k_neighbors: Option<usize>,
    /// Augment once before splitting.
    #[arg(long, conflicts_with = "augment_in_fold")]
    pub augment_global: bool,
    /// Augment inside each training fold (default).
    #[arg(long)]
    pub augment_in_fold: bool,
    /// Two folds, two epochs, no synthetic rows.
    #[arg(long)]
    pub smoke: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labelled CSV; defaults to the training data recorded in the artifact.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "outputs")]
    pub output_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Predict(args) => commands::predict(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
        Command::ExportGraph(args) => commands::export_graph(&args),
        Command::Report(args) => commands::report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
