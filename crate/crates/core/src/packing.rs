//! Sequence packing (unpadding) and its padded execution twin.
//!
//! [`pack`] concatenates ragged documents into one flat token stream with
//! cumulative boundaries so no compute is ever spent on padding; [`pad`] and
//! [`pad_to_length`] build the rectangular layout that standard padded
//! inference would use. The two layouts must produce identical per-token
//! forward values, which the encoder tests assert.

use thiserror::Error;

use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PackingError {
    #[error("no documents to batch")]
    NoDocuments,
    #[error("document {index} is empty")]
    EmptyDocument { index: usize },
    #[error("document {index} has {len} tokens, exceeding the {max_len}-token limit")]
    OverLength {
        index: usize,
        len: usize,
        max_len: usize,
    },
    #[error("document {index} contains the pad id")]
    PadInDocument { index: usize },
    #[error("per-token values have {rows} rows but the batch holds {tokens} tokens")]
    RowCountMismatch { rows: usize, tokens: usize },
    #[error("corrupt packed batch: {0}")]
    Invalid(String),
}

/// Unpadded token stream plus the bookkeeping to recover document boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBatch {
    /// Concatenated token ids; contains no pad id.
    pub token_ids: Vec<u32>,
    /// `cu_seqlens[i]..cu_seqlens[i+1]` spans document `i`.
    pub cu_seqlens: Vec<usize>,
    /// Longest document in the batch.
    pub max_seqlen: usize,
    /// Within-document position of each token, restarting at 0 per document.
    pub positions: Vec<usize>,
}

impl PackedBatch {
    pub fn n_seqs(&self) -> usize {
        self.cu_seqlens.len() - 1
    }

    pub fn total_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn seq_range(&self, i: usize) -> std::ops::Range<usize> {
        self.cu_seqlens[i]..self.cu_seqlens[i + 1]
    }

    /// Checks the structural invariants; `unpack` runs this before trusting
    /// the boundaries.
    pub fn validate(&self) -> Result<(), PackingError> {
        if self.cu_seqlens.first() != Some(&0) {
            return Err(PackingError::Invalid("cu_seqlens must start at 0".into()));
        }
        if !self.cu_seqlens.windows(2).all(|w| w[0] < w[1]) {
            return Err(PackingError::Invalid(
                "cu_seqlens must be strictly increasing".into(),
            ));
        }
        if *self.cu_seqlens.last().unwrap() != self.token_ids.len() {
            return Err(PackingError::Invalid(
                "cu_seqlens must end at the total token count".into(),
            ));
        }
        let max_gap = self
            .cu_seqlens
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0);
        if max_gap != self.max_seqlen {
            return Err(PackingError::Invalid(format!(
                "max_seqlen {} but longest span is {max_gap}",
                self.max_seqlen
            )));
        }
        if self.positions.len() != self.token_ids.len() {
            return Err(PackingError::Invalid(
                "positions length differs from token count".into(),
            ));
        }
        for s in 0..self.n_seqs() {
            for (offset, t) in self.seq_range(s).enumerate() {
                if self.positions[t] != offset {
                    return Err(PackingError::Invalid(format!(
                        "positions must restart per document (token {t})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rectangular layout with pad fill, the "no unpadding" baseline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    /// `[n_docs, padded_len]`, row-major, pad id in the unused tail slots.
    pub token_ids: Vec<u32>,
    pub n_docs: usize,
    pub padded_len: usize,
    /// True exactly on non-pad positions.
    pub validity: Vec<bool>,
}

impl PaddedBatch {
    pub fn total_slots(&self) -> usize {
        self.n_docs * self.padded_len
    }

    pub fn real_tokens(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    pub fn pad_fraction(&self) -> f64 {
        1.0 - self.real_tokens() as f64 / self.total_slots() as f64
    }
}

fn check_docs(docs: &[Vec<u32>], pad_id: u32, max_len: usize) -> Result<(), PackingError> {
    if docs.is_empty() {
        return Err(PackingError::NoDocuments);
    }
    for (index, doc) in docs.iter().enumerate() {
        if doc.is_empty() {
            return Err(PackingError::EmptyDocument { index });
        }
        if doc.len() > max_len {
            return Err(PackingError::OverLength {
                index,
                len: doc.len(),
                max_len,
            });
        }
        if doc.contains(&pad_id) {
            return Err(PackingError::PadInDocument { index });
        }
    }
    Ok(())
}

/// Concatenates documents in arrival order into a [`PackedBatch`].
pub fn pack(docs: &[Vec<u32>], pad_id: u32, max_len: usize) -> Result<PackedBatch, PackingError> {
    check_docs(docs, pad_id, max_len)?;
    let total: usize = docs.iter().map(|d| d.len()).sum();
    let mut token_ids = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut cu_seqlens = Vec::with_capacity(docs.len() + 1);
    cu_seqlens.push(0);
    let mut max_seqlen = 0;
    for doc in docs {
        token_ids.extend_from_slice(doc);
        positions.extend(0..doc.len());
        cu_seqlens.push(token_ids.len());
        max_seqlen = max_seqlen.max(doc.len());
    }
    Ok(PackedBatch {
        token_ids,
        cu_seqlens,
        max_seqlen,
        positions,
    })
}

/// Splits per-token values (one row per packed token) back into one tensor
/// per document.
pub fn unpack<S: Scalar>(
    batch: &PackedBatch,
    values: &Tensor<S>,
) -> Result<Vec<Tensor<S>>, PackingError> {
    batch.validate()?;
    let (rows, cols) = values
        .dims2("unpack")
        .map_err(|e| PackingError::Invalid(e.to_string()))?;
    if rows != batch.total_tokens() {
        return Err(PackingError::RowCountMismatch {
            rows,
            tokens: batch.total_tokens(),
        });
    }
    let mut out = Vec::with_capacity(batch.n_seqs());
    for s in 0..batch.n_seqs() {
        let range = batch.seq_range(s);
        let data = values.data()[range.start * cols..range.end * cols].to_vec();
        let t = Tensor::new(vec![range.len(), cols], data)
            .map_err(|e| PackingError::Invalid(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

/// Pads documents to the longest length in the batch.
pub fn pad(docs: &[Vec<u32>], pad_id: u32, max_len: usize) -> Result<PaddedBatch, PackingError> {
    check_docs(docs, pad_id, max_len)?;
    let longest = docs.iter().map(|d| d.len()).max().unwrap();
    pad_to_length(docs, pad_id, longest)
}

/// Pads documents to a fixed target length (the benchmark pads to the
/// workload's maximum so the baseline does the full rectangular work).
pub fn pad_to_length(
    docs: &[Vec<u32>],
    pad_id: u32,
    target_len: usize,
) -> Result<PaddedBatch, PackingError> {
    check_docs(docs, pad_id, target_len)?;
    let n_docs = docs.len();
    let mut token_ids = vec![pad_id; n_docs * target_len];
    let mut validity = vec![false; n_docs * target_len];
    for (i, doc) in docs.iter().enumerate() {
        token_ids[i * target_len..i * target_len + doc.len()].copy_from_slice(doc);
        validity[i * target_len..i * target_len + doc.len()].fill(true);
    }
    Ok(PaddedBatch {
        token_ids,
        n_docs,
        padded_len: target_len,
        validity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const PAD: u32 = 0;

    fn doc(ids: &[u32]) -> Vec<u32> {
        ids.to_vec()
    }

    #[test]
    fn pack_computes_boundaries_from_lengths() {
        let docs = vec![doc(&[7, 8, 9]), doc(&[1, 2, 3, 4, 5])];
        let batch = pack(&docs, PAD, 16).unwrap();
        assert_eq!(batch.cu_seqlens, vec![0, 3, 8]);
        assert_eq!(batch.max_seqlen, 5);
        assert_eq!(batch.positions, vec![0, 1, 2, 0, 1, 2, 3, 4]);
        batch.validate().unwrap();
    }

    #[test]
    fn single_doc_packing_is_identity() {
        let docs = vec![doc(&[4, 5, 6, 7])];
        let batch = pack(&docs, PAD, 16).unwrap();
        assert_eq!(batch.token_ids, vec![4, 5, 6, 7]);
        assert_eq!(batch.cu_seqlens, vec![0, 4]);
    }

    #[test]
    fn pack_rejects_empty_over_length_and_pad_docs() {
        let err = pack(&[doc(&[1]), vec![]], PAD, 8).unwrap_err();
        assert!(matches!(err, PackingError::EmptyDocument { index: 1 }));
        let err = pack(&[doc(&[1; 9])], PAD, 8).unwrap_err();
        assert!(matches!(err, PackingError::OverLength { index: 0, len: 9, .. }));
        let err = pack(&[doc(&[1, PAD])], PAD, 8).unwrap_err();
        assert!(matches!(err, PackingError::PadInDocument { index: 0 }));
        let err = pack(&[], PAD, 8).unwrap_err();
        assert!(matches!(err, PackingError::NoDocuments));
    }

    #[test]
    fn random_docs_conserve_tokens_and_contain_no_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let docs: Vec<Vec<u32>> = (0..100)
            .map(|_| {
                let len = rng.random_range(1..=32);
                (0..len).map(|_| rng.random_range(5..100)).collect()
            })
            .collect();
        let total: usize = docs.iter().map(|d| d.len()).sum();
        let batch = pack(&docs, PAD, 32).unwrap();
        assert_eq!(batch.total_tokens(), total);
        assert!(!batch.token_ids.contains(&PAD));
        batch.validate().unwrap();
    }

    #[test]
    fn unpack_restores_document_segmentation() {
        let docs = vec![doc(&[1]), doc(&[2]), doc(&[3])];
        let batch = pack(&docs, PAD, 8).unwrap();
        let values = Tensor::<f32>::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let segments = unpack(&batch, &values).unwrap();
        assert_eq!(segments.len(), 3);
        for seg in &segments {
            assert_eq!(seg.shape(), &[1, 2]);
        }
        assert_eq!(segments[1].data(), &[0.3, 0.4]);
    }

    #[test]
    fn unpack_rejects_row_mismatch_and_corrupt_boundaries() {
        let docs = vec![doc(&[1, 2]), doc(&[3])];
        let batch = pack(&docs, PAD, 8).unwrap();
        let bad = Tensor::<f32>::zeros(vec![5, 2]);
        assert!(matches!(
            unpack(&batch, &bad).unwrap_err(),
            PackingError::RowCountMismatch { rows: 5, tokens: 3 }
        ));

        let mut corrupt = batch.clone();
        corrupt.cu_seqlens = vec![0, 3, 2];
        let values = Tensor::<f32>::zeros(vec![3, 2]);
        assert!(matches!(
            unpack(&corrupt, &values).unwrap_err(),
            PackingError::Invalid(_)
        ));

        let mut corrupt = batch.clone();
        corrupt.positions = vec![0, 1, 1];
        assert!(matches!(
            unpack(&corrupt, &values).unwrap_err(),
            PackingError::Invalid(_)
        ));
    }

    #[test]
    fn pad_fills_to_batch_max() {
        let docs = vec![doc(&[1, 2, 3]), doc(&[4, 5, 6, 7, 8])];
        let batch = pad(&docs, PAD, 16).unwrap();
        assert_eq!(batch.total_slots(), 10);
        assert_eq!(batch.token_ids.iter().filter(|&&t| t == PAD).count(), 2);
        assert_eq!(batch.real_tokens(), 8);
    }

    #[test]
    fn equal_lengths_produce_zero_padding() {
        let docs = vec![doc(&[1, 2]), doc(&[3, 4]), doc(&[5, 6])];
        let batch = pad(&docs, PAD, 8).unwrap();
        assert_eq!(batch.real_tokens(), batch.total_slots());
        assert!(batch.validity.iter().all(|&v| v));
    }

    #[test]
    fn normal_length_pad_fraction_matches_length_arithmetic() {
        // Lengths ~ Normal(L/2, L/8) clipped to [1, L]; the padded batch's
        // measured pad fraction must match the fraction computed from the raw
        // lengths within 2%.
        let max_len = 256usize;
        let normal = Normal::new(max_len as f64 / 2.0, max_len as f64 / 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut measured_pad = 0usize;
        let mut slots = 0usize;
        let mut total_len = 0usize;
        let mut expected_slots = 0usize;
        for _ in 0..50 {
            let docs: Vec<Vec<u32>> = (0..20)
                .map(|_| {
                    let len = normal.sample(&mut rng).round().clamp(1.0, max_len as f64) as usize;
                    vec![9; len]
                })
                .collect();
            let lens: Vec<usize> = docs.iter().map(|d| d.len()).collect();
            let batch = pad(&docs, PAD, max_len).unwrap();
            measured_pad += batch.total_slots() - batch.real_tokens();
            slots += batch.total_slots();
            total_len += lens.iter().sum::<usize>();
            expected_slots += lens.iter().max().unwrap() * lens.len();
        }
        let measured = measured_pad as f64 / slots as f64;
        let expected = 1.0 - total_len as f64 / expected_slots as f64;
        assert!(
            (measured - expected).abs() < 0.02,
            "measured {measured}, expected {expected}"
        );
    }

    proptest! {
        #[test]
        fn unpack_of_pack_is_identity(lens in proptest::collection::vec(1usize..12, 1..10)) {
            let docs: Vec<Vec<u32>> = lens.iter().enumerate()
                .map(|(i, &l)| vec![(i + 5) as u32; l])
                .collect();
            let batch = pack(&docs, PAD, 16).unwrap();
            let total = batch.total_tokens();
            let values = Tensor::<f32>::new(
                vec![total, 1],
                (0..total).map(|i| i as f32).collect(),
            ).unwrap();
            let segments = unpack(&batch, &values).unwrap();
            prop_assert_eq!(segments.len(), docs.len());
            for (seg, doc) in segments.iter().zip(&docs) {
                prop_assert_eq!(seg.shape()[0], doc.len());
            }
        }
    }
}
