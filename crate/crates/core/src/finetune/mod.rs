//! Downstream fine-tuning protocol: grid search on a held-out split, early
//! stopping, per-seed reruns at the selected rate, and median reporting.
//!
//! For every learning rate in the grid one run (first seed) is trained with
//! early stopping on the validation metric; the best rate is then rerun under
//! every seed, and the per-seed test scores plus their median form the
//! [`MetricReport`].

mod bio;
mod data;
mod metrics;

pub use bio::{bio_extract, BioError, EntitySpan};
pub use data::{
    encode_ner, read_classification_jsonl, read_ner_jsonl, ClassificationRecord, EncodedNer,
    NerRecord, Split, TagSet,
};
pub use metrics::{
    entity_f1, median, weighted_f1_multi, weighted_f1_single, MetricError, MetricReport,
    PrfScores, REPORT_HEADER,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{BatchView, EncoderModel, ForwardMode, HeadKind, ModelError};
use crate::numerics::{Tape, Tensor, TensorError};
use crate::packing::{pack, PackingError};
use crate::pretrain::TrainError;
use crate::pretrain::AdamW;
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dataset {path} line {line}: {reason}")]
    Data {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("tag {0:?} is not in the task tag set")]
    UnknownTag(String),
    #[error("record {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("record {index}: missing the label field required by the task kind")]
    MissingLabel { index: usize },
    #[error("invalid task spec: {0}")]
    BadTaskSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
    TokenBio,
}

/// Fine-tuning protocol parameters with the standard defaults: 10 epochs,
/// batch size 16, weight decay 1e-5, five seeds, patience 3.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Classes (single-label), labels (multi-label); ignored for token tasks.
    #[serde(default)]
    pub n_classes: usize,
    /// Entity types for token tasks; the tag set is O + B/I per type.
    #[serde(default)]
    pub entity_types: Vec<String>,
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub max_len: Option<usize>,
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    16
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_patience() -> usize {
    3
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if self.lr_grid.is_empty() {
            return Err(FinetuneError::BadTaskSpec("empty learning-rate grid".into()));
        }
        if self.seeds.is_empty() {
            return Err(FinetuneError::BadTaskSpec("no seeds".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(FinetuneError::BadTaskSpec("seeds must be distinct".into()));
        }
        match self.kind {
            TaskKind::TokenBio if self.entity_types.is_empty() => Err(FinetuneError::BadTaskSpec(
                "token task needs entity types".into(),
            )),
            TaskKind::SingleLabel | TaskKind::MultiLabel if self.n_classes == 0 => Err(
                FinetuneError::BadTaskSpec("classification task needs n_classes".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Grid-searched learning rates shipped as presets for five public clinical
/// benchmarks, per model size.
#[derive(Clone, Copy, Debug)]
pub struct LrPreset {
    pub task: &'static str,
    pub base: f64,
    pub large: f64,
}

pub const REFERENCE_TASK_LRS: [LrPreset; 5] = [
    LrPreset {
        task: "chemprot",
        base: 5e-5,
        large: 2e-5,
    },
    LrPreset {
        task: "phenotype",
        base: 8e-5,
        large: 5e-5,
    },
    LrPreset {
        task: "cos",
        base: 1e-4,
        large: 1.5e-4,
    },
    LrPreset {
        task: "social_history",
        base: 1.5e-4,
        large: 2e-4,
    },
    LrPreset {
        task: "deid",
        base: 7e-5,
        large: 7e-5,
    },
];

#[derive(Clone, Debug)]
pub enum TaskDataset {
    Classification(Split<ClassificationRecord>),
    Ner(Split<NerRecord>),
}

impl TaskDataset {
    fn ensure_nonempty(&self) -> Result<(), FinetuneError> {
        match self {
            TaskDataset::Classification(s) => s.ensure_nonempty(),
            TaskDataset::Ner(s) => s.ensure_nonempty(),
        }
    }
}

/// Runs the full protocol and reports per-seed test scores and their median.
pub fn finetune<S: Scalar>(
    base: &EncoderModel<S>,
    spec: &TaskSpec,
    data: &TaskDataset,
    vocab: &Vocab,
    model_name: &str,
) -> Result<MetricReport, FinetuneError> {
    spec.validate()?;
    data.ensure_nonempty()?;
    let task = PreparedTask::new(base, spec, data, vocab)?;

    // Grid search on the first seed, selecting by validation metric.
    let chosen_lr = if spec.lr_grid.len() == 1 {
        spec.lr_grid[0]
    } else {
        let mut best = (f64::NEG_INFINITY, spec.lr_grid[0]);
        for &lr in &spec.lr_grid {
            let run = task.train(base, lr, spec.seeds[0])?;
            if run.best_val > best.0 {
                best = (run.best_val, lr);
            }
        }
        best.1
    };

    let mut per_seed = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let run = task.train(base, chosen_lr, seed)?;
        let test = task.evaluate(&run.model, EvalSplit::Test)?;
        per_seed.push((seed, test));
    }
    let values: Vec<f64> = per_seed.iter().map(|&(_, v)| v).collect();
    Ok(MetricReport {
        task: spec.name.clone(),
        model: model_name.to_string(),
        metric: task.metric_name().to_string(),
        chosen_lr,
        per_seed,
        median: median(&values)?,
    })
}

#[derive(Clone, Copy)]
enum EvalSplit {
    Val,
    Test,
}

/// One encoded example, uniform across task kinds.
struct Example {
    ids: Vec<u32>,
    /// Token-level targets (token task) or empty.
    token_targets: Vec<u32>,
    /// Sequence-level class (single-label).
    class: usize,
    /// Sequence-level binary labels (multi-label).
    binary: Vec<bool>,
    /// First-subword positions and reference word tags (token task).
    word_positions: Vec<usize>,
    word_tags: Vec<String>,
}

struct PreparedTask<'a> {
    spec: &'a TaskSpec,
    vocab: &'a Vocab,
    tag_set: TagSet,
    head: HeadKind,
    train: Vec<Example>,
    val: Vec<Example>,
    test: Vec<Example>,
}

struct TrainedRun<S: Scalar> {
    model: EncoderModel<S>,
    best_val: f64,
}

impl<'a> PreparedTask<'a> {
    fn new<S: Scalar>(
        base: &EncoderModel<S>,
        spec: &'a TaskSpec,
        data: &TaskDataset,
        vocab: &'a Vocab,
    ) -> Result<Self, FinetuneError> {
        let max_len = spec
            .max_len
            .unwrap_or(base.config().max_seq_len)
            .min(base.config().max_seq_len);
        let tag_set = TagSet::from_entity_types(&spec.entity_types);
        let head = match spec.kind {
            TaskKind::SingleLabel => HeadKind::SingleLabel {
                classes: spec.n_classes,
            },
            TaskKind::MultiLabel => HeadKind::MultiLabel {
                labels: spec.n_classes,
            },
            TaskKind::TokenBio => HeadKind::TokenLabel {
                classes: tag_set.len(),
            },
        };
        let encode_split = |records: &TaskDataset,
                            which: EvalSplit,
                            train: bool|
         -> Result<Vec<Example>, FinetuneError> {
            match records {
                TaskDataset::Classification(split) => {
                    let recs = match (which, train) {
                        (_, true) => &split.train,
                        (EvalSplit::Val, false) => &split.val,
                        (EvalSplit::Test, false) => &split.test,
                    };
                    recs.iter()
                        .enumerate()
                        .map(|(index, r)| encode_classification(vocab, spec, r, index, max_len))
                        .collect()
                }
                TaskDataset::Ner(split) => {
                    let recs = match (which, train) {
                        (_, true) => &split.train,
                        (EvalSplit::Val, false) => &split.val,
                        (EvalSplit::Test, false) => &split.test,
                    };
                    recs.iter()
                        .map(|r| {
                            let enc = encode_ner(vocab, r, &tag_set, max_len)?;
                            Ok(Example {
                                ids: enc.ids,
                                token_targets: enc.targets,
                                class: 0,
                                binary: Vec::new(),
                                word_positions: enc.word_positions,
                                word_tags: enc.word_tags,
                            })
                        })
                        .collect()
                }
            }
        };
        Ok(Self {
            spec,
            vocab,
            head,
            train: encode_split(data, EvalSplit::Val, true)?,
            val: encode_split(data, EvalSplit::Val, false)?,
            test: encode_split(data, EvalSplit::Test, false)?,
            tag_set,
        })
    }

    fn metric_name(&self) -> &'static str {
        match self.spec.kind {
            TaskKind::SingleLabel | TaskKind::MultiLabel => "weighted_f1",
            TaskKind::TokenBio => "entity_f1",
        }
    }

    /// Trains with early stopping and returns the best-validation model; the
    /// returned model never scores worse on validation than any epoch seen.
    fn train<S: Scalar>(
        &self,
        base: &EncoderModel<S>,
        lr: f64,
        seed: u64,
    ) -> Result<TrainedRun<S>, FinetuneError> {
        let mut model = base.clone();
        model.attach_head(self.head, seed);
        let mut opt = AdamW::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17));
        let mut best: Option<(f64, BTreeMap<String, Tensor<S>>)> = None;
        let mut stale = 0usize;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for _epoch in 0..self.spec.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.spec.batch_size) {
                let examples: Vec<&Example> = chunk.iter().map(|&i| &self.train[i]).collect();
                let mut tape = Tape::new();
                let (loss_node, leaves) = self.batch_loss(
                    &model,
                    &mut tape,
                    &examples,
                    &mut ForwardMode::Train {
                        dropout_rng: &mut rng,
                    },
                )?;
                tape.backward(loss_node)?;
                let mut grads = BTreeMap::new();
                for (name, node) in &leaves {
                    if let Some(g) = tape.grad(*node) {
                        grads.insert(name.clone(), g.clone());
                    }
                }
                opt.step(model.params_mut(), &grads, lr, self.spec.weight_decay)?;
            }
            let val_metric = self.evaluate(&model, EvalSplit::Val)?;
            let improved = best.as_ref().is_none_or(|(b, _)| val_metric > *b);
            if improved {
                best = Some((val_metric, model.params().clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.spec.patience {
                    break;
                }
            }
        }
        let (best_val, params) = best.expect("at least one epoch");
        *model.params_mut() = params;
        Ok(TrainedRun { model, best_val })
    }

    fn batch_loss<S: Scalar>(
        &self,
        model: &EncoderModel<S>,
        tape: &mut Tape<S>,
        examples: &[&Example],
        mode: &mut ForwardMode,
    ) -> Result<(crate::numerics::NodeId, BTreeMap<String, crate::numerics::NodeId>), FinetuneError>
    {
        let docs: Vec<Vec<u32>> = examples.iter().map(|e| e.ids.clone()).collect();
        let batch = pack(&docs, self.vocab.specials().pad, usize::MAX)?;
        let view = BatchView::from_packed(&batch);
        let out = model.forward_classify(tape, &view, mode)?;
        let loss = match self.spec.kind {
            TaskKind::SingleLabel => {
                let targets: Vec<u32> = examples.iter().map(|e| e.class as u32).collect();
                tape.cross_entropy_with_ignore(out.logits, &targets)?
            }
            TaskKind::MultiLabel => {
                let k = self.spec.n_classes;
                let mut data = Vec::with_capacity(examples.len() * k);
                for e in examples {
                    data.extend(e.binary.iter().map(|&b| if b { S::one() } else { S::zero() }));
                }
                let targets = Tensor::new(vec![examples.len(), k], data)?;
                tape.bce_with_logits(out.logits, &targets)?
            }
            TaskKind::TokenBio => {
                let targets: Vec<u32> = examples
                    .iter()
                    .flat_map(|e| e.token_targets.iter().copied())
                    .collect();
                tape.cross_entropy_with_ignore(out.logits, &targets)?
            }
        };
        Ok((loss, out.leaves))
    }

    fn evaluate<S: Scalar>(
        &self,
        model: &EncoderModel<S>,
        which: EvalSplit,
    ) -> Result<f64, FinetuneError> {
        let examples = match which {
            EvalSplit::Val => &self.val,
            EvalSplit::Test => &self.test,
        };
        let mut true_single = Vec::new();
        let mut pred_single = Vec::new();
        let mut true_multi = Vec::new();
        let mut pred_multi = Vec::new();
        let mut true_tags: Vec<Vec<String>> = Vec::new();
        let mut pred_tags: Vec<Vec<String>> = Vec::new();
        for chunk in examples.chunks(self.spec.batch_size.max(1)) {
            let docs: Vec<Vec<u32>> = chunk.iter().map(|e| e.ids.clone()).collect();
            let batch = pack(&docs, self.vocab.specials().pad, usize::MAX)?;
            let view = BatchView::from_packed(&batch);
            let mut tape = Tape::inference();
            let out = model.forward_classify(&mut tape, &view, &mut ForwardMode::Eval)?;
            let logits = tape.value(out.logits);
            match self.spec.kind {
                TaskKind::SingleLabel => {
                    let (_, k) = logits.dims2("eval")?;
                    for (row, e) in chunk.iter().enumerate() {
                        let r = logits.row(row, k);
                        let arg = argmax(r);
                        true_single.push(e.class);
                        pred_single.push(arg);
                    }
                }
                TaskKind::MultiLabel => {
                    let (_, k) = logits.dims2("eval")?;
                    for (row, e) in chunk.iter().enumerate() {
                        // Sigmoid threshold 0.5 equals logit threshold 0.
                        let preds: Vec<bool> =
                            logits.row(row, k).iter().map(|&z| z > S::zero()).collect();
                        true_multi.push(e.binary.clone());
                        pred_multi.push(preds);
                    }
                }
                TaskKind::TokenBio => {
                    let (_, k) = logits.dims2("eval")?;
                    for (i, e) in chunk.iter().enumerate() {
                        let offset = batch.cu_seqlens[i];
                        let mut tags = Vec::with_capacity(e.word_positions.len());
                        for &p in &e.word_positions {
                            let row = logits.row(offset + p, k);
                            let tag = self.tag_set.tag_of(argmax(row)).unwrap_or("O");
                            tags.push(tag.to_string());
                        }
                        true_tags.push(e.word_tags.clone());
                        pred_tags.push(tags);
                    }
                }
            }
        }
        let value = match self.spec.kind {
            TaskKind::SingleLabel => weighted_f1_single(&true_single, &pred_single)?,
            TaskKind::MultiLabel => weighted_f1_multi(&true_multi, &pred_multi)?,
            TaskKind::TokenBio => entity_f1(&true_tags, &pred_tags)?.f1,
        };
        Ok(value)
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn encode_classification(
    vocab: &Vocab,
    spec: &TaskSpec,
    record: &ClassificationRecord,
    index: usize,
    max_len: usize,
) -> Result<Example, FinetuneError> {
    let mut ids = vocab.encode(&record.text, true);
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(vocab.specials().sep);
    }
    let (class, binary) = match spec.kind {
        TaskKind::SingleLabel => {
            let label = record.label.ok_or(FinetuneError::MissingLabel { index })?;
            if label >= spec.n_classes {
                return Err(FinetuneError::LabelOutOfRange {
                    index,
                    label,
                    classes: spec.n_classes,
                });
            }
            (label, Vec::new())
        }
        TaskKind::MultiLabel => {
            let labels = record
                .labels
                .as_ref()
                .ok_or(FinetuneError::MissingLabel { index })?;
            if labels.len() != spec.n_classes {
                return Err(FinetuneError::LabelOutOfRange {
                    index,
                    label: labels.len(),
                    classes: spec.n_classes,
                });
            }
            (0, labels.iter().map(|&b| b != 0).collect())
        }
        TaskKind::TokenBio => (0, Vec::new()),
    };
    Ok(Example {
        ids,
        token_targets: Vec::new(),
        class,
        binary,
        word_positions: Vec::new(),
        word_tags: Vec::new(),
    })
}
