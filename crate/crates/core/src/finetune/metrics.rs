//! Evaluation metrics: entity-level F1 over exact span matches, support-
//! weighted F1 for single- and multi-label classification, and the median
//! used for seed aggregation.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use thiserror::Error;

use super::bio::{bio_extract, BioError, EntitySpan};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Bio(#[from] BioError),
    #[error("sequence {index}: reference has {true_len} tags but prediction has {pred_len}")]
    LengthMismatch {
        index: usize,
        true_len: usize,
        pred_len: usize,
    },
    #[error("reference and prediction counts differ: {true_n} vs {pred_n}")]
    CountMismatch { true_n: usize, pred_n: usize },
    #[error("label vector {index} has {got} entries, expected {expected}")]
    LabelWidthMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("median of an empty value list")]
    EmptyValues,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, n_pred: usize, n_true: usize) -> PrfScores {
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_true == 0 { 0.0 } else { tp as f64 / n_true as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfScores {
        precision,
        recall,
        f1,
    }
}

/// Micro precision/recall/F1 over exact `(start, end, label)` matches.
pub fn entity_f1<T: AsRef<str>>(
    true_tags: &[Vec<T>],
    pred_tags: &[Vec<T>],
) -> Result<PrfScores, MetricError> {
    if true_tags.len() != pred_tags.len() {
        return Err(MetricError::CountMismatch {
            true_n: true_tags.len(),
            pred_n: pred_tags.len(),
        });
    }
    let mut tp = 0usize;
    let mut n_true = 0usize;
    let mut n_pred = 0usize;
    for (index, (t, p)) in true_tags.iter().zip(pred_tags).enumerate() {
        if t.len() != p.len() {
            return Err(MetricError::LengthMismatch {
                index,
                true_len: t.len(),
                pred_len: p.len(),
            });
        }
        let ts: HashSet<EntitySpan> = bio_extract(t)?.into_iter().collect();
        let ps: HashSet<EntitySpan> = bio_extract(p)?.into_iter().collect();
        tp += ts.intersection(&ps).count();
        n_true += ts.len();
        n_pred += ps.len();
    }
    Ok(prf(tp, n_pred, n_true))
}

/// Per-class F1 averaged with weights proportional to true-class support.
/// Classes absent from the reference contribute weight zero.
pub fn weighted_f1_single(true_ids: &[usize], pred_ids: &[usize]) -> Result<f64, MetricError> {
    if true_ids.len() != pred_ids.len() {
        return Err(MetricError::CountMismatch {
            true_n: true_ids.len(),
            pred_n: pred_ids.len(),
        });
    }
    let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fp: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<usize, usize> = BTreeMap::new();
    let mut support: BTreeMap<usize, usize> = BTreeMap::new();
    for (&t, &p) in true_ids.iter().zip(pred_ids) {
        *support.entry(t).or_default() += 1;
        if t == p {
            *tp.entry(t).or_default() += 1;
        } else {
            *fp.entry(p).or_default() += 1;
            *fn_.entry(t).or_default() += 1;
        }
    }
    let total: usize = support.values().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (&class, &sup) in &support {
        let tp_c = tp.get(&class).copied().unwrap_or(0);
        let fp_c = fp.get(&class).copied().unwrap_or(0);
        let fn_c = fn_.get(&class).copied().unwrap_or(0);
        let denom = 2 * tp_c + fp_c + fn_c;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp_c as f64 / denom as f64
        };
        acc += f1 * sup as f64;
    }
    Ok(acc / total as f64)
}

/// Support-weighted F1 over per-label binary decisions. Labels with zero true
/// positives anywhere in the reference carry weight zero; if no label has
/// support the result is 0 by convention.
pub fn weighted_f1_multi(
    true_labels: &[Vec<bool>],
    pred_labels: &[Vec<bool>],
) -> Result<f64, MetricError> {
    if true_labels.len() != pred_labels.len() {
        return Err(MetricError::CountMismatch {
            true_n: true_labels.len(),
            pred_n: pred_labels.len(),
        });
    }
    let width = true_labels.first().map(|v| v.len()).unwrap_or(0);
    for (index, (t, p)) in true_labels.iter().zip(pred_labels).enumerate() {
        if t.len() != width {
            return Err(MetricError::LabelWidthMismatch {
                index,
                got: t.len(),
                expected: width,
            });
        }
        if p.len() != width {
            return Err(MetricError::LabelWidthMismatch {
                index,
                got: p.len(),
                expected: width,
            });
        }
    }
    let mut acc = 0.0;
    let mut total_support = 0usize;
    for l in 0..width {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        let mut support = 0usize;
        for (t, p) in true_labels.iter().zip(pred_labels) {
            match (t[l], p[l]) {
                (true, true) => {
                    tp += 1;
                    support += 1;
                }
                (true, false) => {
                    fn_ += 1;
                    support += 1;
                }
                (false, true) => fp += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
        acc += f1 * support as f64;
        total_support += support;
    }
    if total_support == 0 {
        return Ok(0.0);
    }
    Ok(acc / total_support as f64)
}

/// Standard median: mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyValues);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Per-seed scores for one fine-tuned task, with the grid-selected rate.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub task: String,
    pub model: String,
    pub metric: String,
    pub chosen_lr: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub median: f64,
}

pub const REPORT_HEADER: &str = "task,model,lr,seed,metric,value";

impl MetricReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for (seed, value) in &self.per_seed {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.task, self.model, self.chosen_lr, seed, self.metric, value
            )?;
        }
        writeln!(
            w,
            "{},{},{},median,{},{}",
            self.task, self.model, self.chosen_lr, self.metric, self.median
        )
    }
}
