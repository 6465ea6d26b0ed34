//! Forward passes over packed and padded batches.
//!
//! Both layouts run through the same block stack via [`BatchView`]; the padded
//! view simply treats every row as a `padded_len`-token sequence and masks pad
//! keys out of attention, which is exactly what makes it a valid oracle for
//! (and baseline against) the packed path.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NodeId, Tape};
use crate::packing::{PackedBatch, PaddedBatch};
use crate::scalar::Scalar;

use super::{EncoderModel, HeadKind, ModelError};

/// Uniform view over packed and padded batches.
#[derive(Clone, Debug)]
pub struct BatchView {
    pub token_ids: Vec<u32>,
    pub cu_seqlens: Vec<usize>,
    pub positions: Vec<usize>,
    pub key_valid: Option<Vec<bool>>,
}

impl BatchView {
    pub fn from_packed(batch: &PackedBatch) -> Self {
        Self {
            token_ids: batch.token_ids.clone(),
            cu_seqlens: batch.cu_seqlens.clone(),
            positions: batch.positions.clone(),
            key_valid: None,
        }
    }

    pub fn from_padded(batch: &PaddedBatch) -> Self {
        let p = batch.padded_len;
        let cu_seqlens = (0..=batch.n_docs).map(|i| i * p).collect();
        let positions = (0..batch.n_docs * p).map(|i| i % p).collect();
        Self {
            token_ids: batch.token_ids.clone(),
            cu_seqlens,
            positions,
            key_valid: Some(batch.validity.clone()),
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.token_ids.len()
    }

    /// Index of the first token of each sequence (the CLS slot).
    pub fn seq_starts(&self) -> Vec<usize> {
        self.cu_seqlens[..self.cu_seqlens.len() - 1].to_vec()
    }
}

/// Dropout is active only in `Train`, drawing masks from the supplied rng.
pub enum ForwardMode<'a> {
    Train { dropout_rng: &'a mut ChaCha8Rng },
    Eval,
}

/// Result of an MLM forward: per-token logits plus the parameter leaves
/// (name -> tape node) the optimizer reads gradients from.
pub struct MlmOutput {
    pub logits: NodeId,
    pub hidden: NodeId,
    pub leaves: BTreeMap<String, NodeId>,
}

pub struct ClassifyOutput {
    pub logits: NodeId,
    pub leaves: BTreeMap<String, NodeId>,
}

/// One attention sublayer's tape nodes; `attention` exposes the probability
/// matrices for inspection.
pub struct AttentionLayerOutput {
    pub output: NodeId,
    pub attention: NodeId,
}

impl<S: Scalar> EncoderModel<S> {
    fn leaf(
        &self,
        tape: &mut Tape<S>,
        leaves: &mut BTreeMap<String, NodeId>,
        name: &str,
    ) -> Result<NodeId, ModelError> {
        if let Some(&id) = leaves.get(name) {
            return Ok(id);
        }
        let id = tape.leaf(self.param(name)?.clone());
        leaves.insert(name.to_string(), id);
        Ok(id)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        mode: &mut ForwardMode,
    ) -> Result<NodeId, ModelError> {
        let p = self.config().dropout;
        match mode {
            ForwardMode::Train { dropout_rng } if p > 0.0 => {
                let keep = S::from_f64(1.0 / (1.0 - p));
                let mask: Vec<S> = (0..tape.value(x).len())
                    .map(|_| {
                        if dropout_rng.random::<f64>() < p {
                            S::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                Ok(tape.dropout(x, mask)?)
            }
            _ => Ok(x),
        }
    }

    /// The attention sublayer of `layer_index` (pre-norm, rotary, masked
    /// attention, output projection); residual add is the caller's job.
    pub fn attention_layer(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        layer_index: usize,
        view: &BatchView,
        leaves: &mut BTreeMap<String, NodeId>,
    ) -> Result<AttentionLayerOutput, ModelError> {
        let config = self.config();
        if layer_index >= config.n_layers {
            return Err(ModelError::LayerOutOfRange {
                index: layer_index,
                n_layers: config.n_layers,
            });
        }
        let gain = self.leaf(tape, leaves, &format!("layer{layer_index}.attn_norm.gain"))?;
        let bias = self.leaf(tape, leaves, &format!("layer{layer_index}.attn_norm.bias"))?;
        let h = tape.layer_norm(x, gain, bias)?;

        let wq = self.leaf(tape, leaves, &format!("layer{layer_index}.attn.wq"))?;
        let wk = self.leaf(tape, leaves, &format!("layer{layer_index}.attn.wk"))?;
        let wv = self.leaf(tape, leaves, &format!("layer{layer_index}.attn.wv"))?;
        let wo = self.leaf(tape, leaves, &format!("layer{layer_index}.attn.wo"))?;

        let theta = config.rope_theta(layer_index);
        let q = tape.matmul(h, wq)?;
        let q = tape.rope(q, &view.positions, config.n_heads, theta)?;
        let k = tape.matmul(h, wk)?;
        let k = tape.rope(k, &view.positions, config.n_heads, theta)?;
        let v = tape.matmul(h, wv)?;

        let window = if config.is_global_layer(layer_index) {
            None
        } else {
            Some(config.window)
        };
        let attention = tape.packed_attention(
            q,
            k,
            v,
            config.n_heads,
            &view.cu_seqlens,
            window,
            view.key_valid.as_deref(),
        )?;
        let output = tape.matmul(attention, wo)?;
        Ok(AttentionLayerOutput { output, attention })
    }

    fn ffn_layer(
        &self,
        tape: &mut Tape<S>,
        x: NodeId,
        layer_index: usize,
        leaves: &mut BTreeMap<String, NodeId>,
    ) -> Result<NodeId, ModelError> {
        let gain = self.leaf(tape, leaves, &format!("layer{layer_index}.ffn_norm.gain"))?;
        let bias = self.leaf(tape, leaves, &format!("layer{layer_index}.ffn_norm.bias"))?;
        let h = tape.layer_norm(x, gain, bias)?;
        let w1 = self.leaf(tape, leaves, &format!("layer{layer_index}.ffn.w1"))?;
        let b1 = self.leaf(tape, leaves, &format!("layer{layer_index}.ffn.b1"))?;
        let w2 = self.leaf(tape, leaves, &format!("layer{layer_index}.ffn.w2"))?;
        let b2 = self.leaf(tape, leaves, &format!("layer{layer_index}.ffn.b2"))?;
        let h = tape.matmul(h, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        Ok(tape.add_bias(h, b2)?)
    }

    /// Embeds tokens and runs every encoder block; returns the final-norm
    /// hidden states (one row per token in the view).
    pub fn forward_hidden(
        &self,
        tape: &mut Tape<S>,
        view: &BatchView,
        mode: &mut ForwardMode,
    ) -> Result<(NodeId, BTreeMap<String, NodeId>), ModelError> {
        if view.total_tokens() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mut leaves = BTreeMap::new();
        let table = self.leaf(tape, &mut leaves, "embed.tok")?;
        let mut x = tape.embedding_lookup(table, &view.token_ids)?;
        for l in 0..self.config().n_layers {
            let attn = self.attention_layer(tape, x, l, view, &mut leaves)?;
            let attn_out = self.maybe_dropout(tape, attn.output, mode)?;
            x = tape.add(x, attn_out)?;
            let ffn = self.ffn_layer(tape, x, l, &mut leaves)?;
            let ffn = self.maybe_dropout(tape, ffn, mode)?;
            x = tape.add(x, ffn)?;
        }
        let gain = self.leaf(tape, &mut leaves, "final_norm.gain")?;
        let bias = self.leaf(tape, &mut leaves, "final_norm.bias")?;
        let x = tape.layer_norm(x, gain, bias)?;
        Ok((x, leaves))
    }

    /// MLM logits over a packed batch: one row per (non-pad) token.
    pub fn forward_mlm(
        &self,
        tape: &mut Tape<S>,
        batch: &PackedBatch,
        mode: &mut ForwardMode,
    ) -> Result<MlmOutput, ModelError> {
        self.forward_mlm_view(tape, &BatchView::from_packed(batch), mode)
    }

    /// Padded twin of [`EncoderModel::forward_mlm`]; logits exist for every
    /// slot including pads, which callers filter through the validity mask.
    pub fn forward_mlm_padded(
        &self,
        tape: &mut Tape<S>,
        batch: &PaddedBatch,
        mode: &mut ForwardMode,
    ) -> Result<MlmOutput, ModelError> {
        self.forward_mlm_view(tape, &BatchView::from_padded(batch), mode)
    }

    pub fn forward_mlm_view(
        &self,
        tape: &mut Tape<S>,
        view: &BatchView,
        mode: &mut ForwardMode,
    ) -> Result<MlmOutput, ModelError> {
        let (hidden, mut leaves) = self.forward_hidden(tape, view, mode)?;
        let w = self.leaf(tape, &mut leaves, "mlm_head.w")?;
        let b = self.leaf(tape, &mut leaves, "mlm_head.b")?;
        let logits = tape.matmul(hidden, w)?;
        let logits = tape.add_bias(logits, b)?;
        Ok(MlmOutput {
            logits,
            hidden,
            leaves,
        })
    }

    /// Task-head logits: sequence heads read the CLS position of each
    /// sequence, the token head emits one row per token.
    pub fn forward_classify(
        &self,
        tape: &mut Tape<S>,
        view: &BatchView,
        mode: &mut ForwardMode,
    ) -> Result<ClassifyOutput, ModelError> {
        let head = self.head().ok_or(ModelError::NoHead)?;
        let (hidden, mut leaves) = self.forward_hidden(tape, view, mode)?;
        let w = self.leaf(tape, &mut leaves, "head.w")?;
        let b = self.leaf(tape, &mut leaves, "head.b")?;
        let pooled = match head {
            HeadKind::SingleLabel { .. } | HeadKind::MultiLabel { .. } => {
                tape.gather_rows(hidden, &view.seq_starts())?
            }
            HeadKind::TokenLabel { .. } => hidden,
        };
        let logits = tape.matmul(pooled, w)?;
        let logits = tape.add_bias(logits, b)?;
        Ok(ClassifyOutput { logits, leaves })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::numerics::{Tensor, IGNORE_TARGET};
    use crate::packing::{pack, pad};
    use rand::{Rng, SeedableRng};

    const PAD: u32 = 0;

    fn tiny_config(vocab: usize) -> ModelConfig {
        let mut c = ModelConfig::preset_tiny(vocab);
        c.dropout = 0.0;
        c
    }

    fn random_docs(rng: &mut ChaCha8Rng, n: usize, min: usize, max: usize, vocab: usize) -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(min..=max);
                (0..len).map(|_| rng.random_range(5..vocab as u32)).collect()
            })
            .collect()
    }

    #[test]
    fn local_attention_window_four_token_zero_sees_three_keys() {
        // |0 - j| <= 2 over a 10-token sequence: exactly {0, 1, 2}.
        let mut config = tiny_config(32);
        config.global_period = 2; // layer 1 is local
        config.window = 4;
        let model = EncoderModel::<f32>::new(config, 1).unwrap();
        let batch = pack(&[(5..15).collect()], PAD, 512).unwrap();
        let view = BatchView::from_packed(&batch);
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let table = tape.leaf(model.param("embed.tok").unwrap().clone());
        let x = tape.embedding_lookup(table, &view.token_ids).unwrap();
        let out = model
            .attention_layer(&mut tape, x, 1, &view, &mut leaves)
            .unwrap();
        let probs = tape.attention_probs(out.attention).unwrap();
        for head_mat in &probs {
            let row0 = head_mat.row(0, 10);
            let reachable: Vec<usize> = (0..10).filter(|&j| row0[j] > 0.0).collect();
            assert_eq!(reachable, vec![0, 1, 2]);
        }
    }

    #[test]
    fn global_layer_rows_sum_to_one() {
        let model = EncoderModel::<f64>::new(tiny_config(32), 2).unwrap();
        let batch = pack(&[(5..21).collect()], PAD, 512).unwrap();
        let view = BatchView::from_packed(&batch);
        let mut tape = Tape::new();
        let mut leaves = BTreeMap::new();
        let table = tape.leaf(model.param("embed.tok").unwrap().clone());
        let x = tape.embedding_lookup(table, &view.token_ids).unwrap();
        let out = model
            .attention_layer(&mut tape, x, 0, &view, &mut leaves)
            .unwrap();
        for mat in tape.attention_probs(out.attention).unwrap() {
            let (rows, cols) = mat.dims2("test").unwrap();
            for i in 0..rows {
                let sum: f64 = mat.row(i, cols).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_mask_matches_brute_force_rule() {
        // Reachable pairs from the recorded probabilities must equal the rule
        // "same sequence AND (global OR |i-j| <= w/2)" on every sequence.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (global, window) in [(true, 0usize), (false, 4), (false, 8)] {
            let mut config = tiny_config(64);
            config.global_period = if global { 1 } else { 2 };
            config.window = if global { 128 } else { window };
            let layer = if global { 0 } else { 1 };
            let model = EncoderModel::<f32>::new(config.clone(), 3).unwrap();
            let docs = random_docs(&mut rng, 3, 2, 24, 64);
            let lens: Vec<usize> = docs.iter().map(|d| d.len()).collect();
            let batch = pack(&docs, PAD, 512).unwrap();
            let view = BatchView::from_packed(&batch);
            let mut tape = Tape::new();
            let mut leaves = BTreeMap::new();
            let table = tape.leaf(model.param("embed.tok").unwrap().clone());
            let x = tape.embedding_lookup(table, &view.token_ids).unwrap();
            let out = model
                .attention_layer(&mut tape, x, layer, &view, &mut leaves)
                .unwrap();
            let probs = tape.attention_probs(out.attention).unwrap();
            let mut mat_idx = 0;
            for &len in &lens {
                for _ in 0..config.n_heads {
                    let mat = &probs[mat_idx];
                    mat_idx += 1;
                    for i in 0..len {
                        for j in 0..len {
                            let rule = global || (i as i64 - j as i64).unsigned_abs() as usize <= window / 2;
                            let reached = mat.row(i, len)[j] > 0.0;
                            assert_eq!(reached, rule, "i={i} j={j} len={len}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn packed_sequences_never_attend_across_boundaries() {
        // The packed multi-doc forward must equal each doc's standalone
        // forward, which is only possible with zero cross-boundary attention.
        let model = EncoderModel::<f32>::new(tiny_config(64), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let docs = random_docs(&mut rng, 3, 4, 20, 64);
        let packed = pack(&docs, PAD, 512).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward_mlm(&mut tape, &packed, &mut ForwardMode::Eval)
            .unwrap();
        let combined = tape.value(out.logits).clone();

        let mut row = 0;
        for doc in &docs {
            let single = pack(std::slice::from_ref(doc), PAD, 512).unwrap();
            let mut t2 = Tape::new();
            let o2 = model
                .forward_mlm(&mut t2, &single, &mut ForwardMode::Eval)
                .unwrap();
            let alone = t2.value(o2.logits);
            let v = combined.shape()[1];
            for i in 0..doc.len() {
                for j in 0..v {
                    let a = combined.data()[(row + i) * v + j];
                    let b = alone.data()[i * v + j];
                    assert!((a - b).abs() < 1e-5, "token {i} logit {j}: {a} vs {b}");
                }
            }
            row += doc.len();
        }
    }

    #[test]
    fn padded_and_packed_logits_agree_on_valid_slots() {
        let model = EncoderModel::<f32>::new(tiny_config(64), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let docs = random_docs(&mut rng, 4, 3, 17, 64);
        let packed = pack(&docs, PAD, 512).unwrap();
        let padded = pad(&docs, PAD, 512).unwrap();

        let mut t1 = Tape::new();
        let packed_logits = {
            let out = model
                .forward_mlm(&mut t1, &packed, &mut ForwardMode::Eval)
                .unwrap();
            t1.value(out.logits).clone()
        };
        let mut t2 = Tape::new();
        let padded_logits = {
            let out = model
                .forward_mlm_padded(&mut t2, &padded, &mut ForwardMode::Eval)
                .unwrap();
            t2.value(out.logits).clone()
        };

        let v = packed_logits.shape()[1];
        let mut max_diff = 0f32;
        let mut packed_row = 0;
        for (d, doc) in docs.iter().enumerate() {
            for i in 0..doc.len() {
                let padded_row = d * padded.padded_len + i;
                for j in 0..v {
                    let a = packed_logits.data()[packed_row * v + j];
                    let b = padded_logits.data()[padded_row * v + j];
                    max_diff = max_diff.max((a - b).abs());
                }
                packed_row += 1;
            }
        }
        assert!(max_diff < 1e-5, "max abs logit diff {max_diff}");
    }

    #[test]
    fn all_global_config_output_is_independent_of_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let docs = random_docs(&mut rng, 2, 6, 30, 32);
        let run = |window: usize| {
            let mut config = tiny_config(32);
            config.global_period = 1;
            config.window = window;
            let model = EncoderModel::<f32>::new(config, 11).unwrap();
            let batch = pack(&docs, PAD, 512).unwrap();
            let mut tape = Tape::new();
            let out = model
                .forward_mlm(&mut tape, &batch, &mut ForwardMode::Eval)
                .unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(8).data(), run(512).data());
    }

    #[test]
    fn zero_initialized_head_predicts_uniformly() {
        let model = EncoderModel::<f64>::new(tiny_config(32), 12).unwrap();
        let batch = pack(&[(5..13).collect()], PAD, 512).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward_mlm(&mut tape, &batch, &mut ForwardMode::Eval)
            .unwrap();
        let probs = tape.softmax_rows(out.logits).unwrap();
        let t = tape.value(probs);
        let (rows, cols) = t.dims2("test").unwrap();
        for i in 0..rows {
            for &p in t.row(i, cols) {
                assert!((p - 1.0 / cols as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_stay_finite_at_full_context() {
        let model = EncoderModel::<f32>::new(tiny_config(64), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let doc: Vec<u32> = (0..512).map(|_| rng.random_range(5..64)).collect();
        let batch = pack(&[doc], PAD, 512).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward_mlm(&mut tape, &batch, &mut ForwardMode::Eval)
            .unwrap();
        assert!(tape.value(out.logits).all_finite());
    }

    #[test]
    fn empty_batch_and_bad_layer_index_error() {
        let model = EncoderModel::<f32>::new(tiny_config(32), 15).unwrap();
        let view = BatchView {
            token_ids: vec![],
            cu_seqlens: vec![0],
            positions: vec![],
            key_valid: None,
        };
        let mut tape = Tape::new();
        assert!(matches!(
            model.forward_mlm_view(&mut tape, &view, &mut ForwardMode::Eval),
            Err(ModelError::EmptyBatch)
        ));

        let batch = pack(&[vec![5, 6]], PAD, 512).unwrap();
        let good = BatchView::from_packed(&batch);
        let mut leaves = BTreeMap::new();
        let table = tape.leaf(model.param("embed.tok").unwrap().clone());
        let x = tape.embedding_lookup(table, &good.token_ids).unwrap();
        assert!(matches!(
            model.attention_layer(&mut tape, x, 99, &good, &mut leaves),
            Err(ModelError::LayerOutOfRange { index: 99, .. })
        ));
    }

    #[test]
    fn classification_heads_have_contractual_shapes() {
        let mut model = EncoderModel::<f32>::new(tiny_config(32), 16).unwrap();

        // Minimal sequence: CLS + SEP only.
        model.attach_head(HeadKind::SingleLabel { classes: 6 }, 1);
        let batch = pack(&[vec![2, 3]], PAD, 512).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward_classify(&mut tape, &BatchView::from_packed(&batch), &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[1, 6]);

        // Token head: one row per token.
        model.attach_head(HeadKind::TokenLabel { classes: 5 }, 2);
        let batch = pack(&[vec![2, 7, 8, 3], vec![2, 9, 3]], PAD, 512).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward_classify(&mut tape, &BatchView::from_packed(&batch), &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[7, 5]);

        // Multi-label over 14 classes: one row of 14 logits per sequence.
        model.attach_head(HeadKind::MultiLabel { labels: 14 }, 3);
        let mut tape = Tape::new();
        let out = model
            .forward_classify(&mut tape, &BatchView::from_packed(&batch), &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[2, 14]);

        model.detach_head();
        let mut tape = Tape::new();
        assert!(matches!(
            model.forward_classify(&mut tape, &BatchView::from_packed(&batch), &mut ForwardMode::Eval),
            Err(ModelError::NoHead)
        ));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // 2-layer, d_model 32 model in f64; central differences at h=1e-3.
        let mut config = tiny_config(48);
        config.d_model = 32;
        config.n_heads = 4;
        config.d_ff = 64;
        config.global_period = 2;
        config.window = 8;
        let mut model = EncoderModel::<f64>::new(config, 17).unwrap();
        // The MLM head starts at zero; randomize it so gradients flow into the
        // encoder stack rather than vanishing through a zero projection.
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for name in ["mlm_head.w", "mlm_head.b"] {
            let t = model.param_mut(name).unwrap();
            let fresh = Tensor::randn(t.shape().to_vec(), 0.05, &mut rng);
            *t = fresh;
        }

        let docs = random_docs(&mut rng, 2, 5, 12, 48);
        let batch = pack(&docs, PAD, 512).unwrap();
        let targets: Vec<u32> = batch
            .token_ids
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if i % 3 == 0 {
                    IGNORE_TARGET
                } else {
                    (5 + (i % 40)) as u32
                }
            })
            .collect();

        let loss_for = |m: &EncoderModel<f64>| -> f64 {
            let mut tape = Tape::new();
            let out = m.forward_mlm(&mut tape, &batch, &mut ForwardMode::Eval).unwrap();
            let loss = tape.cross_entropy_with_ignore(out.logits, &targets).unwrap();
            tape.value(loss).item()
        };

        let mut tape = Tape::new();
        let out = model.forward_mlm(&mut tape, &batch, &mut ForwardMode::Eval).unwrap();
        let loss = tape.cross_entropy_with_ignore(out.logits, &targets).unwrap();
        tape.backward(loss).unwrap();

        let h = 1e-3;
        let names: Vec<String> = model.params().keys().cloned().collect();
        let mut checked = 0;
        for name in names {
            let n = model.param(&name).unwrap().len();
            let node = out.leaves[&name];
            let analytic = tape.grad(node).cloned();
            // Probe a few elements of every parameter tensor.
            for probe in 0..3.min(n) {
                let e = (probe * 97) % n;
                let a = analytic.as_ref().map_or(0.0, |g| g.data()[e]);
                let orig = model.param(&name).unwrap().data()[e];
                model.param_mut(&name).unwrap().data_mut()[e] = orig + h;
                let up = loss_for(&model);
                model.param_mut(&name).unwrap().data_mut()[e] = orig - h;
                let down = loss_for(&model);
                model.param_mut(&name).unwrap().data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (a - numeric).abs() / denom < 1e-3,
                    "{name}[{e}]: analytic {a} vs numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 60, "probed {checked} elements");
    }
}
