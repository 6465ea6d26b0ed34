//! MLM pretraining engine: dynamic masking, the warmup-stable-decay learning
//! rate schedule with 1−sqrt decay variants, deterministic corpus mixing,
//! the AdamW-style optimizer, binary checkpoints, and the two-phase
//! continued-pretraining driver.

mod checkpoint;
mod corpus;
mod driver;
mod masking;
mod mixture;
mod optimizer;
mod scheduler;

pub use checkpoint::{
    inspect_checkpoint, Checkpoint, CheckpointHeader, RngState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use corpus::{prepare_documents, read_jsonl, CorpusRecord, CorpusSet, PreparedCorpus};
pub use driver::{
    evaluate_mlm, write_loss_log, CheckpointPoint, LossRow, PhasePlan, PhaseSchedule, PhaseSource,
    PhaseSpec, Trainer, LOSS_LOG_HEADER,
};
pub use masking::{apply_masking, apply_masking_with_rng, MaskedBatch, MaskingSpec};
pub use mixture::{build_batch_plan, BatchPlan, PlannedBatch, SourceRef};
pub use optimizer::AdamW;
pub use scheduler::{DecayKind, SchedulerSpec};

use thiserror::Error;

use crate::encoder::ModelError;
use crate::numerics::TensorError;
use crate::packing::PackingError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error("masking probability {0} must lie strictly inside (0, 1)")]
    BadProbability(f64),
    #[error("corruption fractions {0:?} must be non-negative and sum to 1")]
    BadCorruptionSplit([f64; 3]),
    #[error("scheduler step {step} out of range (total {total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid scheduler: {0}")]
    BadSchedule(String),
    #[error("corpus {0:?} is empty")]
    EmptyCorpus(String),
    #[error("unknown corpus id {0:?}")]
    UnknownCorpus(String),
    #[error("batch capacity {capacity} tokens is below the longest document ({longest})")]
    CapacityTooSmall { capacity: usize, longest: usize },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the run config: {0}")]
    ConfigMismatch(String),
    #[error("corpus file {path} line {line}: {reason}")]
    CorpusParse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
