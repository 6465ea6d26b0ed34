//! Reverse-mode autodiff tape.
//!
//! Operations append nodes to the tape in execution order, so every node's
//! inputs precede it and a single reverse sweep propagates gradients.
//! Backward is deterministic: identical tapes produce bitwise-identical
//! gradients (matrix kernels parallelize over disjoint output rows only, so
//! each element's summation order is fixed).
//!
//! A tape built with [`Tape::inference`] skips the auxiliary buffers backward
//! needs (attention probabilities, normalization statistics); calling
//! [`Tape::backward`] on one is an error. The throughput benchmark uses this
//! to keep forward-only memory flat.

use crate::scalar::Scalar;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn};
use super::{Tensor, TensorError, IGNORE_TARGET};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward execution mode; `Train` enables dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

struct LayerNormAux<S> {
    x_hat: Vec<S>,
    inv_std: Vec<S>,
}

struct AttentionAux<S> {
    /// Softmax probabilities, concatenated per sequence then per head:
    /// sequence `s` occupies `heads * len_s * len_s` entries.
    probs: Vec<S>,
    /// Offset of each sequence's block in `probs`.
    seq_offsets: Vec<usize>,
}

enum Op<S: Scalar> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        aux: Option<LayerNormAux<S>>,
    },
    Gelu {
        a: NodeId,
    },
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<u32>,
    },
    GatherRows {
        a: NodeId,
        rows: Vec<usize>,
    },
    Rope {
        x: NodeId,
        positions: Vec<usize>,
        n_heads: usize,
        theta: f64,
    },
    PackedAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        cu_seqlens: Vec<usize>,
        aux: Option<AttentionAux<S>>,
    },
    Dropout {
        a: NodeId,
        mask: Vec<S>,
    },
    CrossEntropyIgnore {
        logits: NodeId,
        targets: Vec<u32>,
        n_used: usize,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Tensor<S>,
    },
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    record_aux: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record_aux: true,
        }
    }

    /// Forward-only tape: cheaper, but backward is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record_aux: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient populated by [`Tape::backward`]; `None` means zero (the node
    /// does not influence the loss).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = matmul_nn(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Broadcasts a length-`c` bias over the rows of an `[r, c]` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).dims2("add_bias")?;
        let tb = self.value(bias);
        if tb.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: tb.shape().to_vec(),
            });
        }
        let ta = self.value(a);
        let bd = self.value(bias).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(ta.data()[i * c + j] + bd[j]);
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).dims2("softmax_rows")?;
        let ta = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row(i, c);
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum: S = exps.iter().fold(S::zero(), |s, &v| s + v);
            data.extend(exps.iter().map(|&e| e / sum));
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::SoftmaxRows { a }))
    }

    const LN_EPS: f64 = 1e-5;

    /// Row-wise normalization followed by a learned affine transform.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(x).dims2("layer_norm")?;
        for (id, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(id).shape() != [c] {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![r, c],
                    rhs: self.value(id).shape().to_vec(),
                });
            }
        }
        let eps = S::from_f64(Self::LN_EPS);
        let n = S::from_usize(c);
        let tx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut data = Vec::with_capacity(r * c);
        let mut x_hat = if self.record_aux {
            Vec::with_capacity(r * c)
        } else {
            Vec::new()
        };
        let mut inv_std = if self.record_aux {
            Vec::with_capacity(r)
        } else {
            Vec::new()
        };
        for i in 0..r {
            let row = tx.row(i, c);
            let mean = row.iter().fold(S::zero(), |s, &v| s + v) / n;
            let var = row
                .iter()
                .fold(S::zero(), |s, &v| s + (v - mean) * (v - mean))
                / n;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                if self.record_aux {
                    x_hat.push(xh);
                }
                data.push(g[j] * xh + b[j]);
            }
            if self.record_aux {
                inv_std.push(inv);
            }
        }
        let aux = self
            .record_aux
            .then_some(LayerNormAux { x_hat, inv_std });
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, aux }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu_fwd);
        self.push(value, Op::Gelu { a })
    }

    /// Gathers rows of an embedding table: `table: [vocab, d]`, output `[ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let (rows, d) = self.value(table).dims2("embedding_lookup")?;
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(tt.row(id, d));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(a).dims2("gather_rows")?;
        let ta = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    limit: r,
                });
            }
            data.extend_from_slice(ta.row(i, c));
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Rotary position encoding over `[tokens, n_heads * head_dim]` states.
    ///
    /// Within each head, consecutive pairs `(2i, 2i+1)` are rotated by
    /// `pos * theta^(-2i / head_dim)`; pair norms are preserved.
    pub fn rope(
        &mut self,
        x: NodeId,
        positions: &[usize],
        n_heads: usize,
        theta: f64,
    ) -> Result<NodeId, TensorError> {
        let (t, d) = self.value(x).dims2("rope")?;
        if d % n_heads != 0 {
            return Err(TensorError::HeadSplit {
                op: "rope",
                heads: n_heads,
                dim: d,
            });
        }
        let head_dim = d / n_heads;
        if head_dim % 2 != 0 {
            return Err(TensorError::OddHeadDim(head_dim));
        }
        if positions.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: vec![t, d],
                rhs: vec![positions.len()],
            });
        }
        let value = rope_apply(self.value(x), positions, n_heads, head_dim, theta, false);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                n_heads,
                theta,
            },
        ))
    }

    /// Scaled dot-product attention over a packed token stream.
    ///
    /// Token `i` attends to token `j` iff both lie in the same sequence of
    /// `cu_seqlens`, `j` is not masked out by `key_valid`, and, when `window`
    /// is `Some(w)`, the within-sequence distance satisfies `|i - j| <= w/2`.
    /// Rows whose mask admits no keys produce zero output.
    pub fn packed_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        cu_seqlens: &[usize],
        window: Option<usize>,
        key_valid: Option<&[bool]>,
    ) -> Result<NodeId, TensorError> {
        let (t, d) = self.value(q).dims2("packed_attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [t, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "packed_attention",
                    lhs: vec![t, d],
                    rhs: self.value(other).shape().to_vec(),
                });
            }
        }
        if d % n_heads != 0 {
            return Err(TensorError::HeadSplit {
                op: "packed_attention",
                heads: n_heads,
                dim: d,
            });
        }
        check_boundaries("packed_attention", cu_seqlens, t)?;
        if let Some(valid) = key_valid {
            if valid.len() != t {
                return Err(TensorError::ShapeMismatch {
                    op: "packed_attention",
                    lhs: vec![t],
                    rhs: vec![valid.len()],
                });
            }
        }

        let head_dim = d / n_heads;
        let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
        let n_seqs = cu_seqlens.len() - 1;

        let mut seq_offsets = Vec::with_capacity(n_seqs + 1);
        let mut total = 0usize;
        for s in 0..n_seqs {
            seq_offsets.push(total);
            let len = cu_seqlens[s + 1] - cu_seqlens[s];
            total += n_heads * len * len;
        }
        seq_offsets.push(total);
        let mut probs = if self.record_aux {
            vec![S::zero(); total]
        } else {
            Vec::new()
        };

        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![S::zero(); t * d];
        let mut scratch: Vec<S> = Vec::new();

        for s in 0..n_seqs {
            let base = cu_seqlens[s];
            let len = cu_seqlens[s + 1] - base;
            for h in 0..n_heads {
                let hoff = h * head_dim;
                for i in 0..len {
                    let qrow = &qd[(base + i) * d + hoff..(base + i) * d + hoff + head_dim];
                    scratch.clear();
                    scratch.resize(len, S::neg_infinity());
                    let (lo, hi) = window_bounds(i, len, window);
                    let mut any = false;
                    for j in lo..hi {
                        // Scores are computed for every in-window key and only
                        // then masked: the padded baseline must pay for its
                        // pad slots the way a dense implementation would.
                        let krow = &kd[(base + j) * d + hoff..(base + j) * d + hoff + head_dim];
                        let mut dot = S::zero();
                        for e in 0..head_dim {
                            dot += qrow[e] * krow[e];
                        }
                        if key_valid.is_none_or(|valid| valid[base + j]) {
                            scratch[j] = dot * scale;
                            any = true;
                        }
                    }
                    if !any {
                        continue; // no reachable keys; output row stays zero
                    }
                    let max = scratch.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                    let mut sum = S::zero();
                    for p in scratch.iter_mut() {
                        if p.is_infinite() && *p < S::zero() {
                            *p = S::zero();
                        } else {
                            *p = (*p - max).exp();
                            sum += *p;
                        }
                    }
                    let orow =
                        &mut out[(base + i) * d + hoff..(base + i) * d + hoff + head_dim];
                    for j in lo..hi {
                        let p = scratch[j] / sum;
                        if self.record_aux {
                            probs[seq_offsets[s] + h * len * len + i * len + j] = p;
                        }
                        let vrow = &vd[(base + j) * d + hoff..(base + j) * d + hoff + head_dim];
                        for e in 0..head_dim {
                            orow[e] += p * vrow[e];
                        }
                    }
                }
            }
        }

        let aux = self.record_aux.then_some(AttentionAux { probs, seq_offsets });
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            value,
            Op::PackedAttention {
                q,
                k,
                v,
                n_heads,
                cu_seqlens: cu_seqlens.to_vec(),
                aux,
            },
        ))
    }

    /// Attention probabilities recorded for a [`Tape::packed_attention`] node,
    /// as one `len × len` row-major matrix per `(sequence, head)` pair.
    pub fn attention_probs(&self, id: NodeId) -> Option<Vec<Tensor<S>>> {
        match &self.nodes[id.0].op {
            Op::PackedAttention {
                n_heads,
                cu_seqlens,
                aux: Some(aux),
                ..
            } => {
                let mut mats = Vec::new();
                for s in 0..cu_seqlens.len() - 1 {
                    let len = cu_seqlens[s + 1] - cu_seqlens[s];
                    for h in 0..*n_heads {
                        let start = aux.seq_offsets[s] + h * len * len;
                        let data = aux.probs[start..start + len * len].to_vec();
                        mats.push(Tensor::new(vec![len, len], data).expect("aux layout"));
                    }
                }
                Some(mats)
            }
            _ => None,
        }
    }

    /// Inverted dropout: `mask` entries are either `0` or `1/(1-p)`.
    pub fn dropout(&mut self, a: NodeId, mask: Vec<S>) -> Result<NodeId, TensorError> {
        let ta = self.value(a);
        if mask.len() != ta.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { a, mask }))
    }

    /// Mean cross entropy over rows whose target is not [`IGNORE_TARGET`].
    pub fn cross_entropy_with_ignore(
        &mut self,
        logits: NodeId,
        targets: &[u32],
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![r, c],
                rhs: vec![targets.len()],
            });
        }
        let tl = self.value(logits);
        let mut total = S::zero();
        let mut n_used = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_TARGET {
                continue;
            }
            let t = t as usize;
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    limit: c,
                });
            }
            let row = tl.row(i, c);
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let sum: S = row.iter().fold(S::zero(), |s, &v| s + (v - max).exp());
            total += sum.ln() + max - row[t];
            n_used += 1;
        }
        if n_used == 0 {
            return Err(TensorError::AllTargetsIgnored);
        }
        let value = Tensor::scalar(total / S::from_usize(n_used));
        Ok(self.push(
            value,
            Op::CrossEntropyIgnore {
                logits,
                targets: targets.to_vec(),
                n_used,
            },
        ))
    }

    /// Mean binary cross entropy with logits over every element.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &Tensor<S>,
    ) -> Result<NodeId, TensorError> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: tl.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let mut total = S::zero();
        for (&z, &t) in tl.data().iter().zip(targets.data()) {
            // max(z,0) - z*t + ln(1 + exp(-|z|)), the stable form.
            let pos = z.max(S::zero());
            total += pos - z * t + (S::one() + (-z.abs()).exp()).ln();
        }
        let n = S::from_usize(tl.len());
        let value = Tensor::scalar(total / n);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    fn accumulate(grads: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta).expect("gradient shape"),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Populates gradients for every node contributing to the scalar `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.record_aux {
            return Err(TensorError::InferenceTape);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let da = matmul_nt(&out_grad, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &out_grad)?;
                    Self::accumulate(&mut self.grads, *a, da);
                    Self::accumulate(&mut self.grads, *b, db);
                }
                Op::Add { a, b } => {
                    Self::accumulate(&mut self.grads, *a, out_grad.clone());
                    Self::accumulate(&mut self.grads, *b, out_grad.clone());
                }
                Op::AddBias { a, bias } => {
                    let (r, c) = out_grad.dims2("add_bias_bwd")?;
                    let mut db = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += out_grad.data()[i * c + j];
                        }
                    }
                    Self::accumulate(&mut self.grads, *a, out_grad.clone());
                    Self::accumulate(&mut self.grads, *bias, Tensor::new(vec![c], db)?);
                }
                Op::Mul { a, b } => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let da: Vec<S> = out_grad
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    let db: Vec<S> = out_grad
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    let shape = ta.shape().to_vec();
                    Self::accumulate(&mut self.grads, *a, Tensor::new(shape.clone(), da)?);
                    Self::accumulate(&mut self.grads, *b, Tensor::new(shape, db)?);
                }
                Op::SoftmaxRows { a } => {
                    let p = &node.value;
                    let (r, c) = p.dims2("softmax_bwd")?;
                    let mut dx = vec![S::zero(); r * c];
                    for i in 0..r {
                        let prow = p.row(i, c);
                        let grow = out_grad.row(i, c);
                        let mut dot = S::zero();
                        for j in 0..c {
                            dot += prow[j] * grow[j];
                        }
                        for j in 0..c {
                            dx[i * c + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    Self::accumulate(&mut self.grads, *a, Tensor::new(vec![r, c], dx)?);
                }
                Op::LayerNorm { x, gain, bias, aux } => {
                    let aux = aux.as_ref().ok_or(TensorError::InferenceTape)?;
                    let (r, c) = node.value.dims2("layer_norm_bwd")?;
                    let g = self.value(*gain).data();
                    let n = S::from_usize(c);
                    let mut dx = vec![S::zero(); r * c];
                    let mut dgain = vec![S::zero(); c];
                    let mut dbias = vec![S::zero(); c];
                    for i in 0..r {
                        let grow = out_grad.row(i, c);
                        let xh = &aux.x_hat[i * c..(i + 1) * c];
                        let inv = aux.inv_std[i];
                        let mut mean_h = S::zero();
                        let mut mean_hx = S::zero();
                        for j in 0..c {
                            let h = grow[j] * g[j];
                            mean_h += h;
                            mean_hx += h * xh[j];
                            dgain[j] += grow[j] * xh[j];
                            dbias[j] += grow[j];
                        }
                        mean_h /= n;
                        mean_hx /= n;
                        for j in 0..c {
                            let h = grow[j] * g[j];
                            dx[i * c + j] = inv * (h - mean_h - xh[j] * mean_hx);
                        }
                    }
                    Self::accumulate(&mut self.grads, *x, Tensor::new(vec![r, c], dx)?);
                    Self::accumulate(&mut self.grads, *gain, Tensor::new(vec![c], dgain)?);
                    Self::accumulate(&mut self.grads, *bias, Tensor::new(vec![c], dbias)?);
                }
                Op::Gelu { a } => {
                    let ta = self.value(*a);
                    let dx: Vec<S> = ta
                        .data()
                        .iter()
                        .zip(out_grad.data())
                        .map(|(&x, &g)| g * gelu_bwd(x))
                        .collect();
                    let dx = Tensor::new(ta.shape().to_vec(), dx)?;
                    Self::accumulate(&mut self.grads, *a, dx);
                }
                Op::EmbeddingLookup { table, ids } => {
                    let (rows, d) = self.value(*table).dims2("embedding_bwd")?;
                    let mut dt = Tensor::zeros(vec![rows, d]);
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        let src = out_grad.row(i, d);
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for e in 0..d {
                            dst[e] += src[e];
                        }
                    }
                    Self::accumulate(&mut self.grads, *table, dt);
                }
                Op::GatherRows { a, rows } => {
                    let (r, c) = self.value(*a).dims2("gather_bwd")?;
                    let mut da = Tensor::zeros(vec![r, c]);
                    for (i, &row) in rows.iter().enumerate() {
                        let src = out_grad.row(i, c);
                        let dst = &mut da.data_mut()[row * c..(row + 1) * c];
                        for e in 0..c {
                            dst[e] += src[e];
                        }
                    }
                    Self::accumulate(&mut self.grads, *a, da);
                }
                Op::Rope {
                    x,
                    positions,
                    n_heads,
                    theta,
                } => {
                    let d = self.value(*x).shape()[1];
                    let head_dim = d / n_heads;
                    // Rotation is orthogonal: backward rotates by the negated angle.
                    let dx = rope_apply(&out_grad, positions, *n_heads, head_dim, *theta, true);
                    Self::accumulate(&mut self.grads, *x, dx);
                }
                Op::PackedAttention {
                    q,
                    k,
                    v,
                    n_heads,
                    cu_seqlens,
                    aux,
                    ..
                } => {
                    let aux = aux.as_ref().ok_or(TensorError::InferenceTape)?;
                    let d = self.value(*q).shape()[1];
                    let head_dim = d / n_heads;
                    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
                    let t = self.value(*q).shape()[0];
                    let qd = self.value(*q).data();
                    let kd = self.value(*k).data();
                    let vd = self.value(*v).data();
                    let mut dq = vec![S::zero(); t * d];
                    let mut dk = vec![S::zero(); t * d];
                    let mut dv = vec![S::zero(); t * d];
                    let mut ds: Vec<S> = Vec::new();
                    for s in 0..cu_seqlens.len() - 1 {
                        let base = cu_seqlens[s];
                        let len = cu_seqlens[s + 1] - base;
                        for h in 0..*n_heads {
                            let hoff = h * head_dim;
                            let pbase = aux.seq_offsets[s] + h * len * len;
                            ds.clear();
                            ds.resize(len * len, S::zero());
                            for i in 0..len {
                                let grow = &out_grad.data()
                                    [(base + i) * d + hoff..(base + i) * d + hoff + head_dim];
                                // dP_ij = dOut_i · V_j ; dS = P ⊙ (dP - rowsum(P ⊙ dP))
                                let mut dot = S::zero();
                                for j in 0..len {
                                    let p = aux.probs[pbase + i * len + j];
                                    if p == S::zero() {
                                        continue;
                                    }
                                    let vrow = &vd[(base + j) * d + hoff
                                        ..(base + j) * d + hoff + head_dim];
                                    let mut dp = S::zero();
                                    for e in 0..head_dim {
                                        dp += grow[e] * vrow[e];
                                    }
                                    ds[i * len + j] = dp;
                                    dot += p * dp;
                                }
                                for j in 0..len {
                                    let p = aux.probs[pbase + i * len + j];
                                    ds[i * len + j] = p * (ds[i * len + j] - dot);
                                }
                            }
                            for i in 0..len {
                                let dqrow = &mut dq[(base + i) * d + hoff
                                    ..(base + i) * d + hoff + head_dim];
                                for j in 0..len {
                                    let dsij = ds[i * len + j];
                                    if dsij == S::zero() {
                                        continue;
                                    }
                                    let krow = &kd[(base + j) * d + hoff
                                        ..(base + j) * d + hoff + head_dim];
                                    for e in 0..head_dim {
                                        dqrow[e] += dsij * krow[e] * scale;
                                    }
                                }
                            }
                            for j in 0..len {
                                let dkrow = &mut dk[(base + j) * d + hoff
                                    ..(base + j) * d + hoff + head_dim];
                                let dvrow_start = (base + j) * d + hoff;
                                for i in 0..len {
                                    let dsij = ds[i * len + j];
                                    let p = aux.probs[pbase + i * len + j];
                                    let qrow = &qd[(base + i) * d + hoff
                                        ..(base + i) * d + hoff + head_dim];
                                    let grow = &out_grad.data()[(base + i) * d + hoff
                                        ..(base + i) * d + hoff + head_dim];
                                    for e in 0..head_dim {
                                        if dsij != S::zero() {
                                            dkrow[e] += dsij * qrow[e] * scale;
                                        }
                                        if p != S::zero() {
                                            dv[dvrow_start + e] += p * grow[e];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut self.grads, *q, Tensor::new(vec![t, d], dq)?);
                    Self::accumulate(&mut self.grads, *k, Tensor::new(vec![t, d], dk)?);
                    Self::accumulate(&mut self.grads, *v, Tensor::new(vec![t, d], dv)?);
                }
                Op::Dropout { a, mask } => {
                    let ta = self.value(*a);
                    let dx: Vec<S> = out_grad
                        .data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(&g, &m)| g * m)
                        .collect();
                    let dx = Tensor::new(ta.shape().to_vec(), dx)?;
                    Self::accumulate(&mut self.grads, *a, dx);
                }
                Op::CrossEntropyIgnore {
                    logits,
                    targets,
                    n_used,
                } => {
                    let g = out_grad.item();
                    let (r, c) = self.value(*logits).dims2("cross_entropy_bwd")?;
                    let tl = self.value(*logits);
                    let inv = g / S::from_usize(*n_used);
                    let mut dl = vec![S::zero(); r * c];
                    for (i, &t) in targets.iter().enumerate() {
                        if t == IGNORE_TARGET {
                            continue;
                        }
                        let row = tl.row(i, c);
                        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
                        let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
                        let sum: S = exps.iter().fold(S::zero(), |s, &v| s + v);
                        for j in 0..c {
                            let p = exps[j] / sum;
                            let delta = if j == t as usize { S::one() } else { S::zero() };
                            dl[i * c + j] = (p - delta) * inv;
                        }
                    }
                    Self::accumulate(&mut self.grads, *logits, Tensor::new(vec![r, c], dl)?);
                }
                Op::BceWithLogits { logits, targets } => {
                    let g = out_grad.item();
                    let tl = self.value(*logits);
                    let inv = g / S::from_usize(tl.len());
                    let dl: Vec<S> = tl
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&z, &t)| {
                            let sig = S::one() / (S::one() + (-z).exp());
                            (sig - t) * inv
                        })
                        .collect();
                    let dl = Tensor::new(tl.shape().to_vec(), dl)?;
                    Self::accumulate(&mut self.grads, *logits, dl);
                }
            }
            // Restore this node's grad so callers can inspect intermediate values.
            self.grads[idx] = Some(out_grad);
        }
        Ok(())
    }
}

fn check_boundaries(
    op: &'static str,
    cu_seqlens: &[usize],
    total: usize,
) -> Result<(), TensorError> {
    let ok = cu_seqlens.len() >= 2
        && cu_seqlens[0] == 0
        && cu_seqlens.windows(2).all(|w| w[0] < w[1])
        && *cu_seqlens.last().unwrap() == total;
    if ok {
        Ok(())
    } else {
        Err(TensorError::BadBoundaries {
            op,
            detail: format!("cu_seqlens {cu_seqlens:?} over {total} tokens"),
        })
    }
}

/// Key range reachable from query position `i` under the window rule.
fn window_bounds(i: usize, len: usize, window: Option<usize>) -> (usize, usize) {
    match window {
        None => (0, len),
        Some(w) => {
            let half = w / 2;
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(len);
            (lo, hi)
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

fn rope_apply<S: Scalar>(
    x: &Tensor<S>,
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    theta: f64,
    invert: bool,
) -> Tensor<S> {
    let d = n_heads * head_dim;
    let mut out = x.clone();
    let data = out.data_mut();
    for (t, &pos) in positions.iter().enumerate() {
        for h in 0..n_heads {
            let hoff = t * d + h * head_dim;
            for i in 0..head_dim / 2 {
                let freq = theta.powf(-2.0 * i as f64 / head_dim as f64);
                let mut angle = pos as f64 * freq;
                if invert {
                    angle = -angle;
                }
                let (sin, cos) = (S::from_f64(angle.sin()), S::from_f64(angle.cos()));
                let x0 = data[hoff + 2 * i];
                let x1 = data[hoff + 2 * i + 1];
                data[hoff + 2 * i] = x0 * cos - x1 * sin;
                data[hoff + 2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    out
}
