//! Corpus loading and document preparation.
//!
//! Pretraining corpora are newline-delimited JSON records with `text` and
//! `source` fields. Records are grouped by source, encoded, split into
//! context-sized windows wrapped in CLS/SEP, and dealt into train/validation
//! deterministically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::Vocab;

use super::TrainError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub source: String,
}

/// Reads a JSONL corpus file, reporting the offending line on parse errors.
pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>, TrainError> {
    let content = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(line).map_err(|e| TrainError::CorpusParse {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Encodes texts and windows them into CLS-wrapped documents of at most
/// `max_len` tokens. Documents with no content tokens are dropped.
pub fn prepare_documents<I, T>(vocab: &Vocab, texts: I, max_len: usize) -> Vec<Vec<u32>>
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let specials = vocab.specials();
    let body = max_len.saturating_sub(2).max(1);
    let mut docs = Vec::new();
    for text in texts {
        let ids = vocab.encode(text.as_ref(), false);
        for chunk in ids.chunks(body) {
            if chunk.is_empty() {
                continue;
            }
            let mut doc = Vec::with_capacity(chunk.len() + 2);
            doc.push(specials.cls);
            doc.extend_from_slice(chunk);
            doc.push(specials.sep);
            docs.push(doc);
        }
    }
    docs
}

#[derive(Clone, Debug, Default)]
pub struct PreparedCorpus {
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
}

/// Prepared corpora keyed by source id.
#[derive(Clone, Debug, Default)]
pub struct CorpusSet {
    corpora: BTreeMap<String, PreparedCorpus>,
}

impl CorpusSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, corpus: PreparedCorpus) {
        self.corpora.insert(id.into(), corpus);
    }

    pub fn get(&self, id: &str) -> Result<&PreparedCorpus, TrainError> {
        self.corpora
            .get(id)
            .ok_or_else(|| TrainError::UnknownCorpus(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.corpora.keys().map(|s| s.as_str())
    }

    /// Groups records by `source`, prepares documents, and deals a
    /// deterministic validation split per source.
    pub fn from_records(
        records: &[CorpusRecord],
        vocab: &Vocab,
        max_len: usize,
        val_fraction: f64,
        seed: u64,
    ) -> Self {
        let mut by_source: BTreeMap<String, Vec<&str>> = BTreeMap::new();
        for r in records {
            by_source
                .entry(r.source.clone())
                .or_default()
                .push(r.text.as_str());
        }
        let mut set = Self::new();
        for (source, texts) in by_source {
            let mut docs = prepare_documents(vocab, texts, max_len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(source.as_bytes()));
            docs.shuffle(&mut rng);
            let n_val = ((docs.len() as f64) * val_fraction).round() as usize;
            let n_val = n_val.min(docs.len().saturating_sub(1));
            let val = docs.split_off(docs.len() - n_val);
            set.insert(source, PreparedCorpus { train: docs, val });
        }
        set
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}
