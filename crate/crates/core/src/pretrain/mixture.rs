//! Deterministic multi-corpus batch planning.
//!
//! Each source contributes its documents exactly `epochs` times (shuffled per
//! epoch), grouped first-fit in arrival order into token-capacity batches.
//! Batches from different sources are then interleaved by weighted draws
//! proportional to each source's remaining token budget, so the mixture
//! thins out in proportion as budgets are spent. Everything derives from the
//! seed: the same seed replays the identical batch sequence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;

/// One corpus feeding a phase.
pub struct SourceRef<'a> {
    pub corpus_id: &'a str,
    pub docs: &'a [Vec<u32>],
    pub epochs: usize,
}

/// A batch in the plan: which source, and which of its documents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub source: usize,
    pub doc_ids: Vec<usize>,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub batches: Vec<PlannedBatch>,
    /// Total planned tokens per source (length budget × epochs).
    pub tokens_per_source: Vec<usize>,
}

impl BatchPlan {
    pub fn n_steps(&self) -> usize {
        self.batches.len()
    }
}

pub fn build_batch_plan(
    sources: &[SourceRef<'_>],
    capacity_tokens: usize,
    seed: u64,
) -> Result<BatchPlan, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<Vec<PlannedBatch>> = Vec::with_capacity(sources.len());
    let mut tokens_per_source = Vec::with_capacity(sources.len());
    for (s, source) in sources.iter().enumerate() {
        if source.docs.is_empty() {
            return Err(TrainError::EmptyCorpus(source.corpus_id.to_string()));
        }
        let longest = source.docs.iter().map(|d| d.len()).max().unwrap();
        if longest > capacity_tokens {
            return Err(TrainError::CapacityTooSmall {
                capacity: capacity_tokens,
                longest,
            });
        }
        let mut batches = Vec::new();
        let mut total_tokens = 0usize;
        for _epoch in 0..source.epochs {
            let mut order: Vec<usize> = (0..source.docs.len()).collect();
            order.shuffle(&mut rng);
            let mut current = PlannedBatch {
                source: s,
                doc_ids: Vec::new(),
                tokens: 0,
            };
            for doc_id in order {
                let len = source.docs[doc_id].len();
                if current.tokens + len > capacity_tokens && !current.doc_ids.is_empty() {
                    batches.push(std::mem::replace(
                        &mut current,
                        PlannedBatch {
                            source: s,
                            doc_ids: Vec::new(),
                            tokens: 0,
                        },
                    ));
                }
                current.doc_ids.push(doc_id);
                current.tokens += len;
                total_tokens += len;
            }
            if !current.doc_ids.is_empty() {
                batches.push(current);
            }
        }
        batches.reverse(); // consumed by pop() below
        queues.push(batches);
        tokens_per_source.push(total_tokens);
    }

    let mut remaining: Vec<usize> = tokens_per_source.clone();
    let mut batches = Vec::new();
    loop {
        let total: usize = remaining.iter().sum();
        if total == 0 {
            break;
        }
        let draw = rng.random_range(0..total);
        let mut acc = 0usize;
        let mut pick = 0usize;
        for (s, &r) in remaining.iter().enumerate() {
            acc += r;
            if draw < acc {
                pick = s;
                break;
            }
        }
        let batch = queues[pick].pop().expect("budget and queue agree");
        remaining[pick] -= batch.tokens;
        batches.push(batch);
    }

    Ok(BatchPlan {
        batches,
        tokens_per_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(n: usize, len: usize, tag: u32) -> Vec<Vec<u32>> {
        (0..n).map(|i| vec![tag + i as u32 % 3; len]).collect()
    }

    #[test]
    fn single_source_single_epoch_is_a_shuffled_pass() {
        let d = docs(10, 4, 5);
        let sources = [SourceRef {
            corpus_id: "only",
            docs: &d,
            epochs: 1,
        }];
        let plan = build_batch_plan(&sources, 12, 42).unwrap();
        let mut seen: Vec<usize> = plan
            .batches
            .iter()
            .flat_map(|b| b.doc_ids.iter().copied())
            .collect();
        assert_eq!(seen.len(), 10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn token_budgets_are_exact_per_source() {
        let a = docs(25, 40, 5); // 1,000 tokens per epoch
        let b = docs(20, 50, 9); // 1,000 tokens per epoch
        let sources = [
            SourceRef {
                corpus_id: "a",
                docs: &a,
                epochs: 2,
            },
            SourceRef {
                corpus_id: "b",
                docs: &b,
                epochs: 1,
            },
        ];
        let plan = build_batch_plan(&sources, 200, 7).unwrap();
        assert_eq!(plan.tokens_per_source, vec![2000, 1000]);
        let streamed: Vec<usize> = (0..2)
            .map(|s| {
                plan.batches
                    .iter()
                    .filter(|b| b.source == s)
                    .map(|b| b.tokens)
                    .sum()
            })
            .collect();
        assert_eq!(streamed, vec![2000, 1000]);
    }

    #[test]
    fn same_seed_replays_identical_batches() {
        let a = docs(17, 13, 5);
        let b = docs(11, 29, 9);
        let make = || {
            let sources = [
                SourceRef {
                    corpus_id: "a",
                    docs: &a,
                    epochs: 2,
                },
                SourceRef {
                    corpus_id: "b",
                    docs: &b,
                    epochs: 3,
                },
            ];
            build_batch_plan(&sources, 100, 123).unwrap().batches
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn empty_corpus_and_tight_capacity_error() {
        let empty: Vec<Vec<u32>> = vec![];
        let err = build_batch_plan(
            &[SourceRef {
                corpus_id: "none",
                docs: &empty,
                epochs: 1,
            }],
            100,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::EmptyCorpus(_)));

        let d = docs(2, 64, 5);
        let err = build_batch_plan(
            &[SourceRef {
                corpus_id: "long",
                docs: &d,
                epochs: 1,
            }],
            32,
            0,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            TrainError::CapacityTooSmall {
                capacity: 32,
                longest: 64
            }
        ));
    }
}
