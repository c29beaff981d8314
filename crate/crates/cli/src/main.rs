//! `tabsynth`: build corpora, pre-train and fine-tune generators, sample,
//! impute, balance, and run scenario benchmarks from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tabsynth::scenarios::ScenarioKind;
use tabsynth::table::Task;
use tabsynth::Error;

use commands::DataArgs;
use config::{resolve, Overrides};

#[derive(Debug, Parser)]
#[command(name = "tabsynth", version, about = "Tabular data synthesis with text-serialized language models")]
struct Cli {
    /// Master seed; every random choice of the command derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (TOML, `format_version = 1`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// ngram, neural, or plugin:<command>.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// cart, knn, or plugin:<command>.
    #[arg(long, global = true)]
    backbone: Option<String>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Reject rows with categories absent from the fine-tuning table.
    #[arg(long, global = true)]
    clamp: bool,
    /// feature-name, one-pair, or unconditional.
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Data {
    /// CSV table with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Label column.
    #[arg(long)]
    label: Option<String>,
    /// classification or regression.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
}

impl Data {
    fn args(&self) -> DataArgs<'_> {
        DataArgs {
            path: &self.data,
            label: self.label.as_deref(),
            task: self.task,
        }
    }
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "classification" => Ok(Task::Classification),
        "regression" => Ok(Task::Regression),
        _ => Err(format!("unknown task `{s}`")),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serialize manifest tables into a sentence corpus and vocabulary.
    BuildCorpus {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Serializations per row, each with its own feature order.
        #[arg(long, default_value_t = 1)]
        copies: usize,
    },
    /// Pre-train a built-in backend on manifest tables.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a checkpoint on a downstream table.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate exactly `count` rows shaped like the data table.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the missing feature cells of a table.
    Impute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate minority rows until a binary table is balanced.
    Balance {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run privacy, low-resource, imputation, or imbalance over the seeds.
    Scenario {
        #[arg(value_parser = parse_scenario)]
        kind: ScenarioKind,
        #[command(flatten)]
        data: Data,
        /// Pre-trained checkpoint to start every seed from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pre-train first on the tables of this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Report (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the full pipeline against single-toggle arms.
    Ablation {
        #[command(flatten)]
        data: Data,
        /// Pre-training tables (one pre-training per codec variant).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// no-pretrain, no-label, no-char, or no-names; repeatable; all when omitted.
        #[arg(long = "toggle")]
        toggles: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 3,
        "io" => 4,
        "load" | "schema" => 5,
        "invalid-argument" => 6,
        "codec" => 7,
        "model" => 8,
        "checkpoint" => 9,
        "version-mismatch" => 10,
        "plugin" => 11,
        "sampling-exhausted" => 12,
        _ => 1,
    }
}

fn run(cli: Cli) -> tabsynth::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        backend: cli.backend,
        backbone: cli.backbone,
        temperature: cli.temperature,
        clamp: cli.clamp,
        strategy: cli.strategy,
    };
    let r = resolve(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::BuildCorpus { manifest, out, copies } => commands::build_corpus(&r, manifest, out, *copies),
        Command::Pretrain { manifest, out, epochs } => commands::pretrain(&r, manifest, out, *epochs),
        Command::Finetune {
            checkpoint,
            data,
            out,
            steps,
        } => commands::finetune(&r, checkpoint, &data.args(), out, *steps),
        Command::Sample {
            checkpoint,
            data,
            count,
            out,
        } => commands::sample(&r, checkpoint.as_deref(), &data.args(), *count, out),
        Command::Impute { checkpoint, data, out } => commands::impute(&r, checkpoint.as_deref(), &data.args(), out),
        Command::Balance { checkpoint, data, out } => commands::balance(&r, checkpoint.as_deref(), &data.args(), out),
        Command::Scenario {
            kind,
            data,
            checkpoint,
            manifest,
            out,
        } => commands::scenario(&r, *kind, &data.args(), checkpoint.as_deref(), manifest.as_deref(), out),
        Command::Ablation {
            data,
            manifest,
            toggles,
            out,
        } => commands::ablation(&r, &data.args(), manifest.as_deref(), toggles, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TABSYNTH_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::from(exit_code(category))
        }
    }
}
