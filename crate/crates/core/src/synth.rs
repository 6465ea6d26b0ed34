//! Synthetic corpora and datasets for desk-scale runs.
//!
//! These generators produce small artificial languages with controllable
//! token statistics: word lexicons for MLM corpora (two disjoint lexicons
//! make a clean domain-adaptation pair) and tag-separable NER / classification
//! sets where the label is a deterministic function of the word, so a working
//! fine-tuning pipeline can reach near-perfect scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Documents of `words_per_doc` draws from `lexicon`, Zipf-ish weighted so
/// pair statistics are non-uniform.
pub fn lexicon_corpus(lexicon: &[&str], n_docs: usize, words_per_doc: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..lexicon.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    (0..n_docs)
        .map(|_| {
            (0..words_per_doc)
                .map(|_| {
                    let mut draw = rng.random::<f64>() * total;
                    for (w, &weight) in weights.iter().enumerate() {
                        if draw < weight {
                            return lexicon[w];
                        }
                        draw -= weight;
                    }
                    lexicon[lexicon.len() - 1]
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NerExample {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

/// Tag-separable NER sentences: each entity type owns dedicated begin/inside
/// words, so the correct tag is readable from the word alone.
pub fn separable_ner_dataset(
    entity_types: &[&str],
    n_sentences: usize,
    len: usize,
    seed: u64,
) -> Vec<NerExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers: Vec<String> = (0..8).map(|i| format!("plain{i}")).collect();
    (0..n_sentences)
        .map(|_| {
            let mut tokens = Vec::with_capacity(len);
            let mut tags = Vec::with_capacity(len);
            while tokens.len() < len {
                if rng.random::<f64>() < 0.3 {
                    let t = entity_types[rng.random_range(0..entity_types.len())];
                    let span = rng.random_range(1..=3usize).min(len - tokens.len());
                    for k in 0..span {
                        if k == 0 {
                            tokens.push(format!("{t}head{}", rng.random_range(0..3)));
                            tags.push(format!("B-{t}"));
                        } else {
                            tokens.push(format!("{t}tail{}", rng.random_range(0..3)));
                            tags.push(format!("I-{t}"));
                        }
                    }
                } else {
                    tokens.push(fillers[rng.random_range(0..fillers.len())].clone());
                    tags.push("O".to_string());
                }
            }
            NerExample { tokens, tags }
        })
        .collect()
}

/// Single-label classification texts where one keyword decides the class.
pub fn separable_classification(
    n_classes: usize,
    n_examples: usize,
    len: usize,
    seed: u64,
) -> Vec<(String, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_examples)
        .map(|_| {
            let class = rng.random_range(0..n_classes);
            let key_at = rng.random_range(0..len);
            let words: Vec<String> = (0..len)
                .map(|i| {
                    if i == key_at {
                        format!("topic{class}")
                    } else {
                        format!("noise{}", rng.random_range(0..6))
                    }
                })
                .collect();
            (words.join(" "), class)
        })
        .collect()
}
