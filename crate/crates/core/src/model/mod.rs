// SPDX-License-Identifier: MIT OR Apache-2.0

//! BERT-style masked-LM encoder with hooks on the FFN intermediate neurons.
//!
//! Each block is post-layer-norm: `x = LN(x + Attn(x))`, then
//! `x = LN(x + gelu(x W₁ + b₁) W₂ + b₂)`. The rows of `W₂` are the neurons'
//! value slots. The LM head is tied to the token embedding table.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    forward_cloze, forward_cloze_batch, forward_lm_loss, lm_loss_and_grads, ClozeOutput,
};
pub(crate) use forward::run_forward;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::tensor::OverrideMode;
use crate::error::{KnError, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

/// Shape hyper-parameters of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Four layers, width 128, FFN width 512, four heads.
    pub fn toy(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            d_ffn: 512,
            n_heads: 4,
            vocab_size,
            max_seq_len: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KnError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("layers, width and heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ffn < self.d_model {
            return bad(format!(
                "d_ffn {} smaller than d_model {}",
                self.d_ffn, self.d_model
            ));
        }
        if self.vocab_size < crate::vocab::SPECIAL_TOKENS.len() || self.max_seq_len == 0 {
            return bad("vocabulary or sequence length too small".into());
        }
        Ok(())
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_ffn
    }
}

/// Coordinates of an FFN intermediate neuron: `(layer, index)`, both 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }

    /// Position in a flat `layer * d_ffn + index` layout.
    pub fn flat(self, d_ffn: usize) -> usize {
        self.layer * d_ffn + self.index
    }

    pub fn from_flat(flat: usize, d_ffn: usize) -> Self {
        Self::new(flat / d_ffn, flat % d_ffn)
    }

    pub fn check(self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers || self.index >= cfg.d_ffn {
            return Err(KnError::Index(format!(
                "neuron {self} outside {} layers × {} neurons",
                cfg.n_layers, cfg.d_ffn
            )));
        }
        Ok(())
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.index)
    }
}

/// Per-neuron activation overrides applied at the masked position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeuronOverride {
    modes: BTreeMap<NeuronId, OverrideMode>,
}

impl NeuronOverride {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same mode for every neuron in `ids`.
    pub fn uniform(ids: impl IntoIterator<Item = NeuronId>, mode: OverrideMode) -> Self {
        Self {
            modes: ids.into_iter().map(|n| (n, mode)).collect(),
        }
    }

    /// Sets the mode for `id`, replacing any earlier one.
    pub fn insert(&mut self, id: NeuronId, mode: OverrideMode) {
        self.modes.insert(id, mode);
    }

    pub fn get(&self, id: NeuronId) -> Option<OverrideMode> {
        self.modes.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, OverrideMode)> + '_ {
        self.modes.iter().map(|(&n, &m)| (n, m))
    }
}

/// Parameters of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub attn_ln_gain: Tensor,
    pub attn_ln_bias: Tensor,
    /// `W₁ [d_model × d_ffn]`: one key per column.
    pub ffn_key: Tensor,
    pub ffn_key_bias: Tensor,
    /// `W₂ [d_ffn × d_model]`: one value slot per row.
    pub ffn_value: Tensor,
    pub ffn_value_bias: Tensor,
    pub ffn_ln_gain: Tensor,
    pub ffn_ln_bias: Tensor,
}

/// Full parameter set of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    /// `[vocab × d_model]`, shared with the LM head.
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_gain: Tensor,
    pub emb_ln_bias: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lm_bias: Tensor,
}

impl TransformerWeights {
    /// Random initialisation: `N(0, 0.02²)` matrices, zero biases, unit gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.d_ffn);
        let mut mat = |r: usize, c: usize| Tensor::randn(&[r, c], INIT_STD, &mut rng);
        let token_emb = mat(config.vocab_size, d);
        let pos_emb = mat(config.max_seq_len, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: mat(d, d),
                bq: Tensor::zeros(&[d]),
                wk: mat(d, d),
                bk: Tensor::zeros(&[d]),
                wv: mat(d, d),
                bv: Tensor::zeros(&[d]),
                wo: mat(d, d),
                bo: Tensor::zeros(&[d]),
                attn_ln_gain: Tensor::full(&[d], 1.0),
                attn_ln_bias: Tensor::zeros(&[d]),
                ffn_key: mat(d, f),
                ffn_key_bias: Tensor::zeros(&[f]),
                ffn_value: mat(f, d),
                ffn_value_bias: Tensor::zeros(&[d]),
                ffn_ln_gain: Tensor::full(&[d], 1.0),
                ffn_ln_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            emb_ln_gain: Tensor::full(&[d], 1.0),
            emb_ln_bias: Tensor::zeros(&[d]),
            layers,
            lm_bias: Tensor::zeros(&[config.vocab_size]),
        })
    }

    /// Every parameter tensor with its checkpoint name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embeddings.token".into(), &self.token_emb),
            ("embeddings.position".into(), &self.pos_emb),
            ("embeddings.ln.gain".into(), &self.emb_ln_gain),
            ("embeddings.ln.bias".into(), &self.emb_ln_bias),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, t) in lw.named() {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("lm_head.bias".into(), &self.lm_bias));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.token_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_gain,
            &mut self.emb_ln_bias,
        ];
        for lw in &mut self.layers {
            out.extend(lw.tensors_mut());
        }
        out.push(&mut self.lm_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy of the value slot (row of `W₂`) of neuron `n`.
    pub fn read_value_slot(&self, n: NeuronId) -> Result<Vec<f32>> {
        n.check(&self.config)?;
        Ok(self.layers[n.layer].ffn_value.row(n.index).to_vec())
    }

    /// Replaces the value slot of neuron `n`; no other parameter changes.
    pub fn write_value_slot(&mut self, n: NeuronId, v: &[f32]) -> Result<()> {
        n.check(&self.config)?;
        if v.len() != self.config.d_model {
            return Err(KnError::Dimension(format!(
                "value slot has width {}, got {}",
                self.config.d_model,
                v.len()
            )));
        }
        self.layers[n.layer]
            .ffn_value
            .row_mut(n.index)
            .copy_from_slice(v);
        Ok(())
    }

    /// Embedding row of token `id` (shared with the output head).
    pub fn embedding(&self, id: crate::vocab::TokenId) -> Result<&[f32]> {
        if id as usize >= self.config.vocab_size {
            return Err(KnError::Index(format!("token {id} out of range")));
        }
        Ok(self.token_emb.row(id as usize))
    }

    /// SHA-256 over the canonical checkpoint encoding.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(checkpoint::encode(self));
        hex::encode(hasher.finalize())
    }
}

impl LayerWeights {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("attn.query.weight", &self.wq),
            ("attn.query.bias", &self.bq),
            ("attn.key.weight", &self.wk),
            ("attn.key.bias", &self.bk),
            ("attn.value.weight", &self.wv),
            ("attn.value.bias", &self.bv),
            ("attn.output.weight", &self.wo),
            ("attn.output.bias", &self.bo),
            ("attn.ln.gain", &self.attn_ln_gain),
            ("attn.ln.bias", &self.attn_ln_bias),
            ("ffn.key.weight", &self.ffn_key),
            ("ffn.key.bias", &self.ffn_key_bias),
            ("ffn.value.weight", &self.ffn_value),
            ("ffn.value.bias", &self.ffn_value_bias),
            ("ffn.ln.gain", &self.ffn_ln_gain),
            ("ffn.ln.bias", &self.ffn_ln_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.attn_ln_gain,
            &mut self.attn_ln_bias,
            &mut self.ffn_key,
            &mut self.ffn_key_bias,
            &mut self.ffn_value,
            &mut self.ffn_value_bias,
            &mut self.ffn_ln_gain,
            &mut self.ffn_ln_bias,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerWeights {
        TransformerWeights::init(ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            vocab_size: 12,
            max_seq_len: 8,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::toy(100, 0);
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(KnError::Config(_))));
        let mut cfg = ModelConfig::toy(100, 0);
        cfg.d_ffn = 64;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn value_slot_round_trip_and_isolation() {
        let mut w = tiny();
        let a = NeuronId::new(1, 3);
        let b = NeuronId::new(1, 4);
        let before_b = w.read_value_slot(b).unwrap();
        let v: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
        w.write_value_slot(a, &v).unwrap();
        assert_eq!(w.read_value_slot(a).unwrap(), v);
        assert_eq!(w.read_value_slot(b).unwrap(), before_b);
        w.write_value_slot(a, &[0.0; 8]).unwrap();
        assert_eq!(w.read_value_slot(a).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn value_slot_errors() {
        let mut w = tiny();
        assert!(matches!(
            w.read_value_slot(NeuronId::new(2, 0)),
            Err(KnError::Index(_))
        ));
        assert!(matches!(
            w.write_value_slot(NeuronId::new(0, 0), &[0.0; 7]),
            Err(KnError::Dimension(_))
        ));
    }

    #[test]
    fn write_touches_only_one_row() {
        let mut w = tiny();
        let orig = w.clone();
        w.write_value_slot(NeuronId::new(0, 5), &[1.0; 8]).unwrap();
        let changed: usize = orig
            .named_tensors()
            .iter()
            .zip(w.named_tensors())
            .map(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .filter(|(x, y)| x.to_bits() != y.to_bits())
                    .count()
            })
            .sum();
        assert!(changed <= 8 && changed > 0);
        let orig_row = orig.read_value_slot(NeuronId::new(0, 5)).unwrap();
        w.write_value_slot(NeuronId::new(0, 5), &orig_row).unwrap();
        assert_eq!(w.digest(), orig.digest());
    }

    #[test]
    fn override_keeps_one_mode_per_neuron() {
        let mut o = NeuronOverride::new();
        o.insert(NeuronId::new(0, 1), OverrideMode::Scale(2.0));
        o.insert(NeuronId::new(0, 1), OverrideMode::Set(0.0));
        assert_eq!(o.len(), 1);
        assert_eq!(o.get(NeuronId::new(0, 1)), Some(OverrideMode::Set(0.0)));
    }

    #[test]
    fn named_and_mut_orders_agree() {
        let mut w = tiny();
        let shapes: Vec<Vec<usize>> = w
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let mut_shapes: Vec<Vec<usize>> =
            w.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
    }
}
