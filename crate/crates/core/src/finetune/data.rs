//! Downstream dataset formats and subword label alignment.
//!
//! Classification records are JSONL with `text` plus either `label` (class
//! id) or `labels` (binary vector); NER records carry parallel `tokens` and
//! `tags` word lists. For token tasks only the first subword of each word
//! carries the word's tag; continuation subwords and CLS/SEP take the ignore
//! marker, and predictions are read back from those first-subword positions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::IGNORE_TARGET;
use crate::tokenizer::Vocab;

use super::FinetuneError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassificationRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NerRecord {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, FinetuneError> {
    let content = fs::read_to_string(path).map_err(|e| FinetuneError::Data {
        path: path.display().to_string(),
        line: 0,
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| FinetuneError::Data {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_classification_jsonl(path: &Path) -> Result<Vec<ClassificationRecord>, FinetuneError> {
    read_lines(path)
}

pub fn read_ner_jsonl(path: &Path) -> Result<Vec<NerRecord>, FinetuneError> {
    let records: Vec<NerRecord> = read_lines(path)?;
    for (i, r) in records.iter().enumerate() {
        if r.tokens.len() != r.tags.len() {
            return Err(FinetuneError::Data {
                path: path.display().to_string(),
                line: i + 1,
                reason: format!(
                    "{} tokens but {} tags",
                    r.tokens.len(),
                    r.tags.len()
                ),
            });
        }
    }
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Split<T> {
    pub fn ensure_nonempty(&self) -> Result<(), FinetuneError> {
        for (name, part) in [
            ("train", self.train.len()),
            ("val", self.val.len()),
            ("test", self.test.len()),
        ] {
            if part == 0 {
                return Err(FinetuneError::EmptySplit(name));
            }
        }
        Ok(())
    }
}

/// BIO tag inventory for a fixed set of entity types: `O` first, then
/// `B-t`/`I-t` pairs in the given order.
#[derive(Clone, Debug)]
pub struct TagSet {
    tags: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl TagSet {
    pub fn from_entity_types<T: AsRef<str>>(types: &[T]) -> Self {
        let mut tags = vec!["O".to_string()];
        for t in types {
            tags.push(format!("B-{}", t.as_ref()));
            tags.push(format!("I-{}", t.as_ref()));
        }
        let ids = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tags, ids }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id_of(&self, tag: &str) -> Option<usize> {
        self.ids.get(tag).copied()
    }

    pub fn tag_of(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(|s| s.as_str())
    }
}

/// A word-tagged example encoded to subwords.
#[derive(Clone, Debug)]
pub struct EncodedNer {
    /// CLS + subwords + SEP, truncated to the model context.
    pub ids: Vec<u32>,
    /// Per-token targets; only first subwords carry tag ids.
    pub targets: Vec<u32>,
    /// Position of each surviving word's first subword (within the doc).
    pub word_positions: Vec<usize>,
    /// Word-level reference tags for the surviving words.
    pub word_tags: Vec<String>,
}

/// Encodes words and aligns labels: first subword carries the word tag,
/// continuations are ignored. Words beyond the context are dropped (and
/// excluded from evaluation on both sides).
pub fn encode_ner(
    vocab: &Vocab,
    record: &NerRecord,
    tag_set: &TagSet,
    max_len: usize,
) -> Result<EncodedNer, FinetuneError> {
    let specials = vocab.specials();
    let mut ids = vec![specials.cls];
    let mut targets = vec![IGNORE_TARGET];
    let mut word_positions = Vec::new();
    let mut word_tags = Vec::new();
    for (word, tag) in record.tokens.iter().zip(&record.tags) {
        let tag_id = tag_set
            .id_of(tag)
            .ok_or_else(|| FinetuneError::UnknownTag(tag.clone()))?;
        let pieces = vocab.encode_word(word);
        if pieces.is_empty() {
            continue;
        }
        if ids.len() + pieces.len() + 1 > max_len {
            break;
        }
        word_positions.push(ids.len());
        word_tags.push(tag.clone());
        for (k, piece) in pieces.iter().enumerate() {
            ids.push(*piece);
            targets.push(if k == 0 { tag_id as u32 } else { IGNORE_TARGET });
        }
    }
    ids.push(specials.sep);
    targets.push(IGNORE_TARGET);
    Ok(EncodedNer {
        ids,
        targets,
        word_positions,
        word_tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::bio::bio_extract;
    use std::io::Write;

    fn vocab() -> Vocab {
        let alphabet: String = ('a'..='z').map(|c| format!("{c} x{c}")).collect::<Vec<_>>().join(" ");
        Vocab::train([alphabet.as_str(), "alpha beta gamma"], 90).unwrap()
    }

    #[test]
    fn label_alignment_marks_only_first_subwords() {
        let v = vocab();
        let tag_set = TagSet::from_entity_types(&["x"]);
        let record = NerRecord {
            tokens: vec!["alpha".into(), "qq".into(), "beta".into()],
            tags: vec!["B-x".into(), "I-x".into(), "O".into()],
        };
        let enc = encode_ner(&v, &record, &tag_set, 64).unwrap();
        assert_eq!(enc.word_positions.len(), 3);
        assert_eq!(enc.targets[0], IGNORE_TARGET); // CLS
        let mut labeled = 0;
        for (i, &t) in enc.targets.iter().enumerate() {
            if t != IGNORE_TARGET {
                assert!(enc.word_positions.contains(&i));
                labeled += 1;
            }
        }
        assert_eq!(labeled, 3);

        // Reading back the first-subword tags reconstructs the word tags, and
        // chunk extraction round-trips.
        let read_back: Vec<String> = enc
            .word_positions
            .iter()
            .map(|&p| tag_set.tag_of(enc.targets[p] as usize).unwrap().to_string())
            .collect();
        assert_eq!(read_back, record.tags);
        assert_eq!(
            bio_extract(&read_back).unwrap(),
            bio_extract(&record.tags).unwrap()
        );
    }

    #[test]
    fn unknown_tag_is_an_error() {
        let v = vocab();
        let tag_set = TagSet::from_entity_types(&["x"]);
        let record = NerRecord {
            tokens: vec!["alpha".into()],
            tags: vec!["B-zzz".into()],
        };
        assert!(matches!(
            encode_ner(&v, &record, &tag_set, 64),
            Err(FinetuneError::UnknownTag(_))
        ));
    }

    #[test]
    fn ner_jsonl_validates_token_tag_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ner.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"tokens": ["a", "b"], "tags": ["O"]}}"#).unwrap();
        drop(f);
        let err = read_ner_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("2 tokens but 1 tags"));
    }

    #[test]
    fn classification_jsonl_reads_both_label_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"text": "hello", "label": 2}}"#).unwrap();
        writeln!(f, r#"{{"text": "world", "labels": [0, 1, 0]}}"#).unwrap();
        drop(f);
        let recs = read_classification_jsonl(&path).unwrap();
        assert_eq!(recs[0].label, Some(2));
        assert_eq!(recs[1].labels.as_deref(), Some(&[0u8, 1, 0][..]));
    }
}
