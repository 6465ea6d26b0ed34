//! Inference throughput harness.
//!
//! Synthetic workloads come in fixed-length and variable-length flavors; the
//! variable lengths follow a normal distribution centered at half the class
//! maximum (sd = mean/4 unless overridden), clipped to `[1, max_len]`.
//! Measurement runs the MLM forward pass in two modes: `unpadded` packs real
//! tokens only, `padded` pads every document to the class maximum the way a
//! fixed-shape baseline would. Throughput counts real (non-pad) tokens per
//! second in both modes (padding work is wasted work, not throughput), and
//! batch preparation happens outside the timed region (reported separately).
//! One warmup pass precedes the timed runs.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderModel, ForwardMode, ModelError};
use crate::numerics::Tape;
use crate::packing::{pack, pad_to_length, PackingError};
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error("workload max length {workload} exceeds the model context {model}")]
    ContextExceeded { workload: usize, model: usize },
    #[error("invalid workload: {0}")]
    BadWorkload(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    Fixed { len: usize },
    /// Normal distribution; `sd` defaults to `mean / 4`.
    Normal { mean: f64, sd: Option<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub id: String,
    pub n_docs: usize,
    pub length_mode: LengthMode,
    pub max_len: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    /// Fixed-length class at `len` tokens.
    pub fn fixed(id: &str, n_docs: usize, len: usize, seed: u64) -> Self {
        Self {
            id: id.into(),
            n_docs,
            length_mode: LengthMode::Fixed { len },
            max_len: len,
            seed,
        }
    }

    /// Variable-length class: normal lengths centered at `max_len / 2`.
    pub fn variable(id: &str, n_docs: usize, max_len: usize, seed: u64) -> Self {
        Self {
            id: id.into(),
            n_docs,
            length_mode: LengthMode::Normal {
                mean: max_len as f64 / 2.0,
                sd: None,
            },
            max_len,
            seed,
        }
    }

    pub fn sd_tokens(&self) -> f64 {
        match self.length_mode {
            LengthMode::Fixed { .. } => 0.0,
            LengthMode::Normal { mean, sd } => sd.unwrap_or(mean / 4.0),
        }
    }

    fn mode_label(&self) -> &'static str {
        match self.length_mode {
            LengthMode::Fixed { .. } => "fixed",
            LengthMode::Normal { .. } => "variable",
        }
    }
}

/// Samples document token ids uniformly over the non-special vocabulary.
pub fn generate_workload(spec: &WorkloadSpec, vocab: &Vocab) -> Result<Vec<Vec<u32>>, BenchError> {
    if spec.n_docs == 0 {
        return Err(BenchError::BadWorkload("n_docs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_specials = crate::tokenizer::SpecialIds::count() as u32;
    let size = vocab.size() as u32;
    if size <= n_specials {
        return Err(BenchError::BadWorkload("vocabulary has no content ids".into()));
    }
    let lengths: Vec<usize> = match spec.length_mode {
        LengthMode::Fixed { len } => {
            if len == 0 || len > spec.max_len {
                return Err(BenchError::BadWorkload(format!(
                    "fixed length {len} outside [1, {}]",
                    spec.max_len
                )));
            }
            vec![len; spec.n_docs]
        }
        LengthMode::Normal { mean, sd } => {
            let sd = sd.unwrap_or(mean / 4.0);
            let normal = Normal::new(mean, sd.max(f64::MIN_POSITIVE))
                .map_err(|e| BenchError::BadWorkload(e.to_string()))?;
            (0..spec.n_docs)
                .map(|_| {
                    normal
                        .sample(&mut rng)
                        .round()
                        .clamp(1.0, spec.max_len as f64) as usize
                })
                .collect()
        }
    };
    Ok(lengths
        .into_iter()
        .map(|len| {
            (0..len)
                .map(|_| rng.random_range(n_specials..size))
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Unpadded,
    Padded,
}

impl ExecutionMode {
    pub fn label(&self) -> &'static str {
        match self {
            ExecutionMode::Unpadded => "unpadded",
            ExecutionMode::Padded => "padded",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ThroughputResult {
    pub workload_id: String,
    pub length_mode: &'static str,
    pub mode: ExecutionMode,
    /// Mean real-token throughput over the timed runs.
    pub kilo_tokens_per_second: f64,
    pub per_run: Vec<f64>,
    pub runs: usize,
    pub real_tokens: usize,
    pub slot_tokens: usize,
    /// Batch-preparation time, outside the timed region.
    pub prep_seconds: f64,
    pub sd_tokens: f64,
}

enum PreparedBatches<S: Scalar> {
    Packed(Vec<crate::packing::PackedBatch>),
    Padded(Vec<crate::packing::PaddedBatch>),
    #[allow(dead_code)]
    Phantom(std::marker::PhantomData<S>),
}

/// Times the forward passes over a workload, averaged over `runs` after one
/// warmup pass.
pub fn measure<S: Scalar>(
    model: &EncoderModel<S>,
    spec: &WorkloadSpec,
    docs: &[Vec<u32>],
    mode: ExecutionMode,
    runs: usize,
    batch_capacity_tokens: usize,
    pad_id: u32,
) -> Result<ThroughputResult, BenchError> {
    let model_len = model.config().max_seq_len;
    let longest = docs.iter().map(|d| d.len()).max().unwrap_or(0);
    if spec.max_len > model_len || longest > model_len {
        return Err(BenchError::ContextExceeded {
            workload: spec.max_len.max(longest),
            model: model_len,
        });
    }
    let real_tokens: usize = docs.iter().map(|d| d.len()).sum();

    let prep_start = Instant::now();
    let capacity = batch_capacity_tokens.max(spec.max_len);
    let batches: PreparedBatches<S> = match mode {
        ExecutionMode::Unpadded => {
            let mut out = Vec::new();
            for group in group_by_tokens(docs, capacity) {
                out.push(pack(group, pad_id, model_len)?);
            }
            PreparedBatches::Packed(out)
        }
        ExecutionMode::Padded => {
            // Every document is padded to the class maximum, as a fixed-shape
            // inference server would.
            let docs_per_batch = (capacity / spec.max_len).max(1);
            let mut out = Vec::new();
            for group in docs.chunks(docs_per_batch) {
                out.push(pad_to_length(group, pad_id, spec.max_len)?);
            }
            PreparedBatches::Padded(out)
        }
    };
    let prep_seconds = prep_start.elapsed().as_secs_f64();
    let slot_tokens = match &batches {
        PreparedBatches::Packed(bs) => bs.iter().map(|b| b.total_tokens()).sum(),
        PreparedBatches::Padded(bs) => bs.iter().map(|b| b.total_slots()).sum(),
        PreparedBatches::Phantom(_) => 0,
    };

    let run_once = |_: usize| -> Result<f64, BenchError> {
        let start = Instant::now();
        match &batches {
            PreparedBatches::Packed(bs) => {
                for b in bs {
                    let mut tape = Tape::inference();
                    let out = model.forward_mlm(&mut tape, b, &mut ForwardMode::Eval)?;
                    std::hint::black_box(tape.value(out.logits).data().first().copied());
                }
            }
            PreparedBatches::Padded(bs) => {
                for b in bs {
                    let mut tape = Tape::inference();
                    let out = model.forward_mlm_padded(&mut tape, b, &mut ForwardMode::Eval)?;
                    std::hint::black_box(tape.value(out.logits).data().first().copied());
                }
            }
            PreparedBatches::Phantom(_) => {}
        }
        Ok(start.elapsed().as_secs_f64())
    };

    run_once(0)?; // warmup, excluded from the average
    let mut per_run = Vec::with_capacity(runs);
    for r in 0..runs {
        let seconds = run_once(r + 1)?;
        per_run.push(real_tokens as f64 / seconds / 1000.0);
    }
    let mean = per_run.iter().sum::<f64>() / per_run.len().max(1) as f64;
    Ok(ThroughputResult {
        workload_id: spec.id.clone(),
        length_mode: spec.mode_label(),
        mode,
        kilo_tokens_per_second: mean,
        per_run,
        runs,
        real_tokens,
        slot_tokens,
        prep_seconds,
        sd_tokens: spec.sd_tokens(),
    })
}

/// Greedy arrival-order grouping under a token budget.
fn group_by_tokens(docs: &[Vec<u32>], capacity: usize) -> Vec<&[Vec<u32>]> {
    let mut groups = Vec::new();
    let mut start = 0;
    while start < docs.len() {
        let mut end = start;
        let mut tokens = 0;
        while end < docs.len() && (end == start || tokens + docs[end].len() <= capacity) {
            tokens += docs[end].len();
            end += 1;
        }
        groups.push(&docs[start..end]);
        start = end;
    }
    groups
}

pub const MEASUREMENTS_HEADER: &str = "model,workload_class,length_mode,mode,ktok_per_s,runs,sd_tokens";

/// Long-form CSV: one row per (model, measurement) pair.
pub fn write_measurements_csv<W: Write>(
    mut w: W,
    entries: &[(String, ThroughputResult)],
) -> std::io::Result<()> {
    writeln!(w, "{MEASUREMENTS_HEADER}")?;
    for (model_name, r) in entries {
        writeln!(
            w,
            "{},{},{},{},{:.3},{},{}",
            model_name,
            r.workload_id,
            r.length_mode,
            r.mode.label(),
            r.kilo_tokens_per_second,
            r.runs,
            r.sd_tokens
        )?;
    }
    Ok(())
}

/// Matrix CSV: one row per model, one column per workload class, dashes where
/// the model's context cannot take the workload.
pub fn write_matrix_csv<W: Write>(
    mut w: W,
    workload_ids: &[String],
    rows: &[(String, Vec<Option<f64>>)],
) -> std::io::Result<()> {
    write!(w, "model")?;
    for id in workload_ids {
        write!(w, ",{id}")?;
    }
    writeln!(w)?;
    for (model, cells) in rows {
        write!(w, "{model}")?;
        for cell in cells {
            match cell {
                Some(v) => write!(w, ",{v:.3}")?,
                None => write!(w, ",-")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}
