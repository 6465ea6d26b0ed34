//! Two-phase continued-pretraining driver.
//!
//! A [`PhasePlan`] lists phases; each phase mixes one or more corpora for a
//! configured number of epochs under its own masking probability and learning
//! rate schedule. Phase 1 of the reference recipe runs entirely in the stable
//! stage on a joint mixture; phase 2 specializes on one corpus with a 1−sqrt
//! decay. Resuming from a checkpoint replays the deterministic batch plan and
//! the saved rng state, so the continued loss log is bitwise identical to an
//! uninterrupted run.

use std::collections::BTreeMap;
use std::io::Write;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, ForwardMode, ModelConfig};
use crate::numerics::Tape;
use crate::packing::pack;
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;

use super::checkpoint::{Checkpoint, RngState};
use super::corpus::CorpusSet;
use super::masking::{apply_masking_with_rng, MaskingSpec};
use super::mixture::{build_batch_plan, SourceRef};
use super::optimizer::AdamW;
use super::scheduler::{DecayKind, SchedulerSpec, FULL_SCALE_BASE_PEAK_LR, FULL_SCALE_LARGE_PEAK_LR};
use super::TrainError;

/// Reference full-scale per-step document counts.
pub const FULL_SCALE_BASE_BATCH_DOCS: usize = 72;
pub const FULL_SCALE_LARGE_BATCH_DOCS: usize = 77;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseSource {
    pub corpus_id: String,
    pub epochs: usize,
}

/// Learning-rate shape of a phase; step counts come from the batch plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSchedule {
    /// Hold the peak for the whole phase (stable-stage continuation).
    Stable,
    /// 1−sqrt decay across every step of the phase.
    OneMinusSqrt,
    /// Constant through the leading fraction, then 1−sqrt over the rest.
    ConstantThenOneMinusSqrt { constant_fraction: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: String,
    pub sources: Vec<PhaseSource>,
    pub mlm_probability: f64,
    pub peak_lr: f64,
    pub schedule: PhaseSchedule,
    #[serde(default)]
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_capacity_tokens: usize,
    #[serde(default)]
    pub checkpoint_interval: Option<u64>,
}

impl PhaseSpec {
    /// Concrete schedule once the phase's step count is known.
    pub fn scheduler(&self, total_steps: usize) -> Result<SchedulerSpec, TrainError> {
        let warmup = self.warmup_steps.min(total_steps);
        let rest = total_steps - warmup;
        let spec = match self.schedule {
            PhaseSchedule::Stable => SchedulerSpec {
                peak_lr: self.peak_lr,
                warmup_steps: warmup,
                stable_steps: rest,
                decay_steps: 0,
                decay_kind: DecayKind::OneMinusSqrt,
            },
            PhaseSchedule::OneMinusSqrt => SchedulerSpec {
                peak_lr: self.peak_lr,
                warmup_steps: warmup,
                stable_steps: 0,
                decay_steps: rest,
                decay_kind: DecayKind::OneMinusSqrt,
            },
            PhaseSchedule::ConstantThenOneMinusSqrt { constant_fraction } => SchedulerSpec {
                peak_lr: self.peak_lr,
                warmup_steps: warmup,
                stable_steps: 0,
                decay_steps: rest,
                decay_kind: DecayKind::ConstantThenOneMinusSqrt { constant_fraction },
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phases: Vec<PhaseSpec>,
}

impl PhasePlan {
    /// Reference two-phase recipe at full scale (base size): joint stable
    /// mixture at 30% masking, then a 1−sqrt decay over three epochs of the
    /// specialization corpus at 15%.
    pub fn full_scale_base() -> Self {
        Self {
            phases: vec![
                PhaseSpec {
                    name: "phase1-joint".into(),
                    sources: vec![
                        PhaseSource {
                            corpus_id: "biomedical".into(),
                            epochs: 3,
                        },
                        PhaseSource {
                            corpus_id: "clinical".into(),
                            epochs: 3,
                        },
                    ],
                    mlm_probability: 0.30,
                    peak_lr: FULL_SCALE_BASE_PEAK_LR,
                    schedule: PhaseSchedule::Stable,
                    warmup_steps: 0,
                    weight_decay: 1e-5,
                    batch_capacity_tokens: FULL_SCALE_BASE_BATCH_DOCS * 8192,
                    checkpoint_interval: None,
                },
                PhaseSpec {
                    name: "phase2-specialize".into(),
                    sources: vec![PhaseSource {
                        corpus_id: "clinical".into(),
                        epochs: 3,
                    }],
                    mlm_probability: 0.15,
                    peak_lr: FULL_SCALE_BASE_PEAK_LR,
                    schedule: PhaseSchedule::OneMinusSqrt,
                    warmup_steps: 0,
                    weight_decay: 1e-5,
                    batch_capacity_tokens: FULL_SCALE_BASE_BATCH_DOCS * 8192,
                    checkpoint_interval: None,
                },
            ],
        }
    }

    /// The large-size variant: lower peak, and phase 2 holds the peak for the
    /// first two thirds of its steps before the 1−sqrt decay.
    pub fn full_scale_large() -> Self {
        let mut plan = Self::full_scale_base();
        for phase in &mut plan.phases {
            phase.peak_lr = FULL_SCALE_LARGE_PEAK_LR;
            phase.batch_capacity_tokens = FULL_SCALE_LARGE_BATCH_DOCS * 8192;
        }
        plan.phases[1].schedule = PhaseSchedule::ConstantThenOneMinusSqrt {
            constant_fraction: 2.0 / 3.0,
        };
        plan
    }
}

/// One loss-log record; the CSV form is `step,phase,lr,loss,source`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub phase: u32,
    pub lr: f64,
    pub loss: f64,
    pub source: String,
}

pub const LOSS_LOG_HEADER: &str = "step,phase,lr,loss,source";

pub fn write_loss_log<W: Write>(mut w: W, rows: &[LossRow]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.phase, r.lr, r.loss, r.source)?;
    }
    Ok(())
}

/// Where in a phase a checkpoint was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointPoint {
    PhaseStart,
    Interval,
    PhaseEnd,
}

/// Owns the model, optimizer state, and rng across phases.
pub struct Trainer<S: Scalar> {
    model: EncoderModel<S>,
    opt: AdamW<S>,
    train_rng: ChaCha8Rng,
    global_step: u64,
    phase_index: u32,
    step_in_phase: u64,
    data_seed: u64,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh trainer; `seed` fixes initialization, masking, dropout, and the
    /// data order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let model = EncoderModel::new(config, seed)?;
        Ok(Self {
            model,
            opt: AdamW::new(),
            train_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64_6f6d_u64),
            global_step: 0,
            phase_index: 0,
            step_in_phase: 0,
            data_seed: seed,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<S>) -> Result<Self, TrainError> {
        let model = EncoderModel::from_parts(ckpt.config, ckpt.params, None)?;
        Ok(Self {
            model,
            opt: AdamW::from_state(ckpt.opt_m, ckpt.opt_v, ckpt.adam_t),
            train_rng: ckpt.rng.restore(),
            global_step: ckpt.global_step,
            phase_index: ckpt.phase_index,
            step_in_phase: ckpt.step_in_phase,
            data_seed: ckpt.data_seed,
        })
    }

    pub fn model(&self) -> &EncoderModel<S> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut EncoderModel<S> {
        &mut self.model
    }

    pub fn into_model(self) -> EncoderModel<S> {
        self.model
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn phase_index(&self) -> u32 {
        self.phase_index
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint<S> {
        let (m, v) = self.opt.moments();
        Checkpoint {
            config: self.model.config().clone(),
            global_step: self.global_step,
            phase_index: self.phase_index,
            step_in_phase: self.step_in_phase,
            adam_t: self.opt.step_count(),
            data_seed: self.data_seed,
            params: self.model.params().clone(),
            opt_m: m.clone(),
            opt_v: v.clone(),
            rng: RngState::capture(&self.train_rng),
        }
    }

    /// Runs (or resumes) phase `phase_number` (1-based) of the plan.
    ///
    /// `on_log` sees one row per optimizer step; `on_checkpoint` fires at the
    /// phase start (fresh runs only), at `checkpoint_interval` boundaries, and
    /// at the phase end.
    pub fn run_phase(
        &mut self,
        spec: &PhaseSpec,
        phase_number: u32,
        corpora: &CorpusSet,
        vocab: &Vocab,
        mut on_log: impl FnMut(&LossRow),
        mut on_checkpoint: impl FnMut(&Checkpoint<S>, CheckpointPoint) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let sources: Vec<SourceRef<'_>> = spec
            .sources
            .iter()
            .map(|s| {
                Ok(SourceRef {
                    corpus_id: s.corpus_id.as_str(),
                    docs: corpora.get(&s.corpus_id)?.train.as_slice(),
                    epochs: s.epochs,
                })
            })
            .collect::<Result<_, TrainError>>()?;
        let plan_seed = self
            .data_seed
            .wrapping_add((phase_number as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let plan = build_batch_plan(&sources, spec.batch_capacity_tokens, plan_seed)?;
        let total_steps = plan.n_steps();
        let scheduler = spec.scheduler(total_steps)?;
        let masking = MaskingSpec::bert(spec.mlm_probability, plan_seed);
        masking.validate()?;

        let resuming = self.phase_index == phase_number && self.step_in_phase > 0;
        if !resuming {
            self.phase_index = phase_number;
            self.step_in_phase = 0;
            on_checkpoint(&self.checkpoint(), CheckpointPoint::PhaseStart)?;
        }

        let pad = vocab.specials().pad;
        let max_len = self.model.config().max_seq_len;
        for step in (self.step_in_phase as usize)..total_steps {
            let planned = &plan.batches[step];
            let source_id = sources[planned.source].corpus_id.to_string();
            let docs: Vec<Vec<u32>> = planned
                .doc_ids
                .iter()
                .map(|&i| sources[planned.source].docs[i].clone())
                .collect();
            let batch = pack(&docs, pad, max_len)?;
            let masked = apply_masking_with_rng(&batch, &masking, vocab, &mut self.train_rng)?;
            if masked.n_selected == 0 {
                // Nothing to predict in this batch; still consume the step.
                self.global_step += 1;
                self.step_in_phase = (step + 1) as u64;
                continue;
            }

            let mut tape = Tape::new();
            let out = self.model.forward_mlm(
                &mut tape,
                &masked.corrupted,
                &mut ForwardMode::Train {
                    dropout_rng: &mut self.train_rng,
                },
            )?;
            let loss_node = tape.cross_entropy_with_ignore(out.logits, &masked.targets)?;
            let loss = tape.value(loss_node).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: self.global_step,
                });
            }
            tape.backward(loss_node)?;

            let mut grads = BTreeMap::new();
            for (name, node) in &out.leaves {
                if let Some(g) = tape.grad(*node) {
                    grads.insert(name.clone(), g.clone());
                }
            }
            let lr = scheduler.lr_at(step)?;
            self.opt
                .step(self.model.params_mut(), &grads, lr, spec.weight_decay)?;

            self.global_step += 1;
            self.step_in_phase = (step + 1) as u64;
            on_log(&LossRow {
                step: self.global_step,
                phase: phase_number,
                lr,
                loss: loss.to_f64(),
                source: source_id,
            });
            if let Some(interval) = spec.checkpoint_interval {
                if interval > 0 && self.step_in_phase % interval == 0 && step + 1 < total_steps {
                    on_checkpoint(&self.checkpoint(), CheckpointPoint::Interval)?;
                }
            }
        }
        on_checkpoint(&self.checkpoint(), CheckpointPoint::PhaseEnd)?;
        Ok(())
    }
}

/// Mean masked-token loss over `docs` with deterministic evaluation masking.
///
/// Runs in eval mode (no dropout) on an inference tape; the same seed always
/// masks the same positions, so successive evaluations are comparable.
pub fn evaluate_mlm<S: Scalar>(
    model: &EncoderModel<S>,
    docs: &[Vec<u32>],
    vocab: &Vocab,
    mlm_probability: f64,
    seed: u64,
    batch_capacity_tokens: usize,
) -> Result<f64, TrainError> {
    let masking = MaskingSpec::bert(mlm_probability, seed);
    masking.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = vocab.specials().pad;
    let max_len = model.config().max_seq_len;

    let mut loss_sum = 0.0f64;
    let mut n_masked = 0usize;
    let mut start = 0usize;
    while start < docs.len() {
        let mut end = start;
        let mut tokens = 0usize;
        while end < docs.len() && (end == start || tokens + docs[end].len() <= batch_capacity_tokens)
        {
            tokens += docs[end].len();
            end += 1;
        }
        let batch = pack(&docs[start..end], pad, max_len)?;
        let masked = apply_masking_with_rng(&batch, &masking, vocab, &mut rng)?;
        if masked.n_selected > 0 {
            let mut tape = Tape::inference();
            let out = model.forward_mlm(&mut tape, &masked.corrupted, &mut ForwardMode::Eval)?;
            let loss_node = tape.cross_entropy_with_ignore(out.logits, &masked.targets)?;
            let loss = tape.value(loss_node).item().to_f64();
            loss_sum += loss * masked.n_selected as f64;
            n_masked += masked.n_selected;
        }
        start = end;
    }
    if n_masked == 0 {
        return Err(TrainError::Checkpoint(
            "evaluation selected no tokens; corpus too small".into(),
        ));
    }
    Ok(loss_sum / n_masked as f64)
}
