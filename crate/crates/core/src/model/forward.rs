// SPDX-License-Identifier: MIT OR Apache-2.0

//! Encoder forward pass built on the gradient tape.

use super::{NeuronOverride, TransformerWeights, LN_EPS};
use crate::error::{KnError, Result};
use crate::tensor::{softmax_in_place, OverrideMode, Tape, Tensor, Var};
use crate::vocab::ClozeQuery;

/// Result of running a cloze query through the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeOutput {
    /// Probability of the query's answer token at the mask.
    pub answer_prob: f32,
    /// `ln P(answer)` from a log-sum-exp over the logits (no underflow).
    pub answer_logprob: f64,
    /// Softmax over the vocabulary at the mask.
    pub distribution: Vec<f32>,
    /// FFN intermediate activations at the mask, per layer, before overrides.
    pub activations: Vec<Vec<f32>>,
    /// FFN input hidden state at the mask, per layer.
    pub ffn_inputs: Vec<Vec<f32>>,
}

impl ClozeOutput {
    /// Highest-probability token (lowest id on ties).
    pub fn top_token(&self) -> u32 {
        let mut best = 0usize;
        for (i, &p) in self.distribution.iter().enumerate() {
            if p > self.distribution[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Tape and handles of one batched forward pass.
pub(crate) struct ForwardPass {
    pub tape: Tape,
    /// Parameter leaves in [`TransformerWeights::named_tensors`] order.
    pub params: Vec<Var>,
    /// Row of each sequence's mask position in the stacked `[N×·]` layout.
    pub mask_rows: Vec<usize>,
    pub ffn_inputs: Vec<Var>,
    /// `gelu(H W₁ + b₁)` per layer, before overrides.
    pub activations: Vec<Var>,
    /// Neuron values fed into `W₂` (after overrides).
    pub neurons: Vec<Var>,
    /// `[B × vocab]` logits at the mask positions.
    pub logits: Var,
}

/// One input sequence: tokens and the position whose output is read.
pub(crate) type SeqRef<'a> = (&'a [u32], usize);

/// Builds the forward graph for a batch of sequences.
///
/// `overrides` is either empty (no hooks) or holds one entry per sequence,
/// applied at that sequence's mask position. With `trainable`, parameter
/// leaves require gradients; with `track_neurons`, the post-override neuron
/// nodes of every layer do, so their gradients can be read after backward.
pub(crate) fn run_forward(
    weights: &TransformerWeights,
    seqs: &[SeqRef<'_>],
    overrides: &[&NeuronOverride],
    trainable: bool,
    track_neurons: bool,
) -> Result<ForwardPass> {
    let cfg = &weights.config;
    if seqs.is_empty() {
        return Err(KnError::Contract("empty batch".into()));
    }
    if !overrides.is_empty() && overrides.len() != seqs.len() {
        return Err(KnError::Contract(format!(
            "{} overrides for {} sequences",
            overrides.len(),
            seqs.len()
        )));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    let mut mask_rows = Vec::with_capacity(seqs.len());
    for &(tokens, mask_pos) in seqs {
        if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
            return Err(KnError::Dimension(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if mask_pos >= tokens.len() {
            return Err(KnError::Query(format!(
                "mask position {mask_pos} beyond sequence of length {}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(KnError::Index(format!(
                "token {bad} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
        let start = ids.len();
        segments.push((start, tokens.len()));
        mask_rows.push(start + mask_pos);
        ids.extend(tokens.iter().map(|&t| t as usize));
        positions.extend(0..tokens.len());
    }

    // Per-layer flat edits on the [N × d_ffn] activation matrix.
    let mut edits: Vec<Vec<(usize, OverrideMode)>> = vec![Vec::new(); cfg.n_layers];
    for (b, ov) in overrides.iter().enumerate() {
        for (n, mode) in ov.iter() {
            n.check(cfg)?;
            edits[n.layer].push((mask_rows[b] * cfg.d_ffn + n.index, mode));
        }
    }

    let mut tape = Tape::new();
    let params: Vec<Var> = weights
        .named_tensors()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone(), trainable))
        .collect();
    // Leaf order mirrors named_tensors: 4 embedding tensors, 16 per layer, lm bias.
    let p = |i: usize| params[i];
    let layer_p = |l: usize, j: usize| params[4 + l * 16 + j];

    let tok = tape.gather_rows(p(0), &ids)?;
    let pos = tape.gather_rows(p(1), &positions)?;
    let summed = tape.add(tok, pos)?;
    let mut x = tape.layer_norm(summed, p(2), p(3), LN_EPS)?;

    let mut ffn_inputs = Vec::with_capacity(cfg.n_layers);
    let mut activations = Vec::with_capacity(cfg.n_layers);
    let mut neurons = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let lin = |tape: &mut Tape, input: Var, w: usize, b: usize| -> Result<Var> {
            let m = tape.matmul(input, layer_p(l, w))?;
            tape.add_row(m, layer_p(l, b))
        };
        let q = lin(&mut tape, x, 0, 1)?;
        let k = lin(&mut tape, x, 2, 3)?;
        let v = lin(&mut tape, x, 4, 5)?;
        let ctx = tape.attention(q, k, v, &segments, cfg.n_heads)?;
        let attn_out = lin(&mut tape, ctx, 6, 7)?;
        let res = tape.add(x, attn_out)?;
        let h = tape.layer_norm(res, layer_p(l, 8), layer_p(l, 9), LN_EPS)?;
        ffn_inputs.push(h);

        let pre = lin(&mut tape, h, 10, 11)?;
        let act = tape.gelu(pre);
        activations.push(act);
        let neur = if edits[l].is_empty() && !track_neurons {
            act
        } else {
            tape.override_elements(act, &edits[l], track_neurons)?
        };
        neurons.push(neur);
        let ffn_out = lin(&mut tape, neur, 12, 13)?;
        let res = tape.add(h, ffn_out)?;
        x = tape.layer_norm(res, layer_p(l, 14), layer_p(l, 15), LN_EPS)?;
    }

    let at_mask = tape.gather_rows(x, &mask_rows)?;
    let scores = tape.matmul_nt(at_mask, p(0))?;
    let logits = tape.add_row(scores, p(params.len() - 1))?;

    Ok(ForwardPass {
        tape,
        params,
        mask_rows,
        ffn_inputs,
        activations,
        neurons,
        logits,
    })
}

fn outputs_from_pass(
    pass: &ForwardPass,
    answers: impl Iterator<Item = u32>,
) -> Vec<ClozeOutput> {
    let tape = &pass.tape;
    let logits = tape.value(pass.logits);
    let vocab = logits.shape()[1];
    let row_of = |v: Var, row: usize| {
        let t = tape.value(v);
        let cols = t.shape()[1];
        t.data()[row * cols..(row + 1) * cols].to_vec()
    };
    answers
        .enumerate()
        .map(|(b, answer)| {
            let row_logits = &logits.data()[b * vocab..(b + 1) * vocab];
            let max = row_logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = f64::from(max)
                + row_logits
                    .iter()
                    .map(|&z| f64::from(z - max).exp())
                    .sum::<f64>()
                    .ln();
            let answer_logprob = f64::from(row_logits[answer as usize]) - lse;
            let mut distribution = row_logits.to_vec();
            softmax_in_place(&mut distribution);
            let row = pass.mask_rows[b];
            ClozeOutput {
                answer_prob: distribution[answer as usize],
                answer_logprob,
                activations: pass.activations.iter().map(|&a| row_of(a, row)).collect(),
                ffn_inputs: pass.ffn_inputs.iter().map(|&h| row_of(h, row)).collect(),
                distribution,
            }
        })
        .collect()
}

/// Runs one cloze query with optional neuron overrides at the mask.
pub fn forward_cloze(
    weights: &TransformerWeights,
    query: &ClozeQuery,
    overrides: &NeuronOverride,
) -> Result<ClozeOutput> {
    let mut out = forward_cloze_batch(weights, std::slice::from_ref(query), &[overrides])?;
    Ok(out.pop().expect("one output per query"))
}

/// Batched [`forward_cloze`]. `overrides` is empty or one entry per query.
///
/// Sequences are stacked without padding, so each query's output does not
/// depend on what else is in the batch.
pub fn forward_cloze_batch(
    weights: &TransformerWeights,
    queries: &[ClozeQuery],
    overrides: &[&NeuronOverride],
) -> Result<Vec<ClozeOutput>> {
    for q in queries {
        q.validate(weights.config.vocab_size)?;
    }
    let seqs: Vec<SeqRef<'_>> = queries
        .iter()
        .map(|q| (q.tokens.as_slice(), q.mask_pos))
        .collect();
    let overrides: Vec<&NeuronOverride> = if overrides.iter().all(|o| o.is_empty()) {
        Vec::new()
    } else {
        overrides.to_vec()
    };
    let pass = run_forward(weights, &seqs, &overrides, false, false)?;
    Ok(outputs_from_pass(&pass, queries.iter().map(|q| q.answer)))
}

fn loss_pass(weights: &TransformerWeights, batch: &[ClozeQuery], trainable: bool) -> Result<(ForwardPass, Var)> {
    if batch.is_empty() {
        return Err(KnError::Contract("empty batch".into()));
    }
    for q in batch {
        q.validate(weights.config.vocab_size)?;
    }
    let seqs: Vec<SeqRef<'_>> = batch
        .iter()
        .map(|q| (q.tokens.as_slice(), q.mask_pos))
        .collect();
    let mut pass = run_forward(weights, &seqs, &[], trainable, false)?;
    let targets: Vec<usize> = batch.iter().map(|q| q.answer as usize).collect();
    let loss = pass.tape.cross_entropy(pass.logits, &targets)?;
    Ok((pass, loss))
}

/// Mean cross-entropy of the answers at the masked positions.
pub fn forward_lm_loss(weights: &TransformerWeights, batch: &[ClozeQuery]) -> Result<f32> {
    let (pass, loss) = loss_pass(weights, batch, false)?;
    Ok(pass.tape.value(loss).data()[0])
}

/// Loss and its gradient for every parameter, in
/// [`TransformerWeights::named_tensors`] order.
pub fn lm_loss_and_grads(
    weights: &TransformerWeights,
    batch: &[ClozeQuery],
) -> Result<(f32, Vec<Tensor>)> {
    let (mut pass, loss) = loss_pass(weights, batch, true)?;
    pass.tape.backward(loss)?;
    let grads = pass
        .params
        .iter()
        .zip(weights.named_tensors())
        .map(|(&v, (_, t))| {
            pass.tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok((pass.tape.value(loss).data()[0], grads))
}
