//! Dynamic MLM corruption.
//!
//! Every eligible token (anything but CLS/SEP/PAD) is independently selected
//! with probability `mlm_probability`; a selected token becomes `<mask>`, a
//! random non-special id, or stays unchanged according to the corruption
//! split. Targets carry the original id at selected positions and the ignore
//! marker everywhere else, so the loss averages over corrupted positions only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::IGNORE_TARGET;
use crate::packing::PackedBatch;
use crate::tokenizer::Vocab;

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingSpec {
    pub mlm_probability: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
    pub rng_seed: u64,
}

impl MaskingSpec {
    /// The conventional 80/10/10 mask/random/keep split at probability `p`.
    pub fn bert(p: f64, rng_seed: u64) -> Self {
        Self {
            mlm_probability: p,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.mlm_probability > 0.0 && self.mlm_probability < 1.0) {
            return Err(TrainError::BadProbability(self.mlm_probability));
        }
        let f = [self.mask_fraction, self.random_fraction, self.keep_fraction];
        let sum: f64 = f.iter().sum();
        if f.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(TrainError::BadCorruptionSplit(f));
        }
        Ok(())
    }
}

/// Corrupted batch plus per-token targets (original id or ignore marker).
#[derive(Clone, Debug)]
pub struct MaskedBatch {
    pub corrupted: PackedBatch,
    pub targets: Vec<u32>,
    pub n_selected: usize,
}

/// Seeds a fresh rng from `spec.rng_seed`; the training loop uses
/// [`apply_masking_with_rng`] so draws come from the checkpointed stream.
pub fn apply_masking(
    batch: &PackedBatch,
    spec: &MaskingSpec,
    vocab: &Vocab,
) -> Result<MaskedBatch, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    apply_masking_with_rng(batch, spec, vocab, &mut rng)
}

pub fn apply_masking_with_rng(
    batch: &PackedBatch,
    spec: &MaskingSpec,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedBatch, TrainError> {
    spec.validate()?;
    let specials = vocab.specials();
    let n_specials = crate::tokenizer::SpecialIds::count() as u32;
    let vocab_size = vocab.size() as u32;
    let mut corrupted = batch.clone();
    let mut targets = vec![IGNORE_TARGET; batch.token_ids.len()];
    let mut n_selected = 0;
    for (i, id) in corrupted.token_ids.iter_mut().enumerate() {
        let original = *id;
        if original == specials.cls || original == specials.sep || original == specials.pad {
            continue;
        }
        if rng.random::<f64>() >= spec.mlm_probability {
            continue;
        }
        targets[i] = original;
        n_selected += 1;
        let roll: f64 = rng.random();
        if roll < spec.mask_fraction {
            *id = specials.mask;
        } else if roll < spec.mask_fraction + spec.random_fraction {
            *id = rng.random_range(n_specials..vocab_size);
        }
        // otherwise: keep the original token, target still set
    }
    Ok(MaskedBatch {
        corrupted,
        targets,
        n_selected,
    })
}
