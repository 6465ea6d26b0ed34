//! `longenc`: one entry point wiring the workbench together: vocabulary
//! training, two-phase MLM pretraining, fine-tuning, metric evaluation,
//! throughput benchmarking, and schedule/checkpoint inspection.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (non-finite loss or gradient), 1 anything else.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use longenc_core::bench::BenchError;
use longenc_core::encoder::ModelError;
use longenc_core::finetune::{FinetuneError, MetricError};
use longenc_core::pretrain::TrainError;
use longenc_core::tokenizer::TokenizerError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGrad { .. } | TrainError::NonFiniteLoss { .. } => {
                CliError::Numeric(e.to_string())
            }
            TrainError::BadProbability(_)
            | TrainError::BadCorruptionSplit(_)
            | TrainError::BadSchedule(_)
            | TrainError::StepOutOfRange { .. }
            | TrainError::CapacityTooSmall { .. }
            | TrainError::UnknownCorpus(_)
            | TrainError::ConfigMismatch(_) => CliError::Config(e.to_string()),
            TrainError::EmptyCorpus(_)
            | TrainError::CorpusParse { .. }
            | TrainError::Checkpoint(_)
            | TrainError::Io(_) => CliError::Data(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::TargetTooSmall { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        match e {
            FinetuneError::BadTaskSpec(_) => CliError::Config(e.to_string()),
            FinetuneError::Data { .. }
            | FinetuneError::EmptySplit(_)
            | FinetuneError::UnknownTag(_)
            | FinetuneError::LabelOutOfRange { .. }
            | FinetuneError::MissingLabel { .. } => CliError::Data(e.to_string()),
            FinetuneError::Train(t) => t.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::ContextExceeded { .. } | BenchError::BadWorkload(_) => {
                CliError::Config(e.to_string())
            }
            BenchError::Io(_) => CliError::Data(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "longenc",
    version,
    about = "Long-context encoder workbench: tokenizer, pretraining, fine-tuning, benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a subword vocabulary from the configured corpus files.
    VocabTrain {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set tokenizer.target_size=512
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run the configured pretraining phases (optionally resuming).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Resume from a checkpoint produced by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on one configured task and report metrics.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Task name from the config's tasks section.
        #[arg(long)]
        task: String,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compute metrics from gold and prediction files (no model involved).
    Eval {
        /// entity (NER jsonl), single, or multi (classification jsonl).
        #[arg(long)]
        kind: String,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Measure inference throughput over the configured workloads.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Emit the learning-rate curve of one phase as CSV.
    ScheduleDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set")]
        sets: Vec<String>,
        /// 1-based phase number.
        #[arg(long)]
        phase: usize,
        /// Step count to evaluate the schedule over.
        #[arg(long)]
        total_steps: usize,
    },
    /// Print the header of a checkpoint file.
    CheckpointInspect {
        #[arg(long)]
        path: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::VocabTrain { config, sets } => commands::vocab_train(&config, &sets),
        Command::Pretrain {
            config,
            sets,
            resume,
        } => commands::pretrain(&config, &sets, resume.as_deref()),
        Command::Finetune {
            config,
            sets,
            task,
            checkpoint,
        } => commands::finetune_cmd(&config, &sets, &task, &checkpoint),
        Command::Eval { kind, gold, pred } => commands::eval_cmd(&kind, &gold, &pred),
        Command::Bench { config, sets } => commands::bench_cmd(&config, &sets),
        Command::ScheduleDump {
            config,
            sets,
            phase,
            total_steps,
        } => commands::schedule_dump(&config, &sets, phase, total_steps),
        Command::CheckpointInspect { path } => commands::checkpoint_inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
