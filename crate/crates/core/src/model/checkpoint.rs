// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint format.
//!
//! ```text
//! magic        7 bytes  "KNEUR01"
//! config       8 × u32  n_layers, d_model, d_ffn, n_heads, vocab_size,
//!                       max_seq_len, seed (low word), seed (high word)
//! count        u32      number of tensors
//! per tensor   u32 name length, name bytes (UTF-8), u32 rank,
//!              rank × u32 dims, product(dims) × f32 data
//! ```
//!
//! All integers and floats are little-endian. Tensors appear in
//! [`TransformerWeights::named_tensors`] order.

use std::fs;
use std::path::Path;

use super::{ModelConfig, TransformerWeights};
use crate::error::{KnError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"KNEUR01";

pub(crate) fn encode(weights: &TransformerWeights) -> Vec<u8> {
    let c = &weights.config;
    let tensors = weights.named_tensors();
    let mut out = Vec::with_capacity(64 + weights.parameter_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let seed = c.seed;
    for v in [
        c.n_layers as u32,
        c.d_model as u32,
        c.d_ffn as u32,
        c.n_heads as u32,
        c.vocab_size as u32,
        c.max_seq_len as u32,
        seed as u32,
        (seed >> 32) as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KnError::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<TransformerWeights> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(KnError::Format("bad checkpoint magic".into()));
    }
    let mut words = [0u32; 8];
    for w in &mut words {
        *w = r.u32()?;
    }
    let config = ModelConfig {
        n_layers: words[0] as usize,
        d_model: words[1] as usize,
        d_ffn: words[2] as usize,
        n_heads: words[3] as usize,
        vocab_size: words[4] as usize,
        max_seq_len: words[5] as usize,
        seed: u64::from(words[6]) | (u64::from(words[7]) << 32),
    };
    config
        .validate()
        .map_err(|e| KnError::Format(format!("checkpoint config: {e}")))?;
    let mut weights = TransformerWeights::init(config)?;
    let expected: Vec<(String, Vec<usize>)> = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(KnError::Format(format!(
            "checkpoint has {count} tensors, expected {}",
            expected.len()
        )));
    }
    for ((name, shape), dst) in expected.iter().zip(weights.tensors_mut()) {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?)
            .map_err(|_| KnError::Format("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(KnError::Format(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(KnError::Format(format!(
                "tensor {name} has shape {dims:?}, expected {shape:?}"
            )));
        }
        let raw = r.take(dst.numel() * 4)?;
        for (v, b) in dst.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if r.pos != bytes.len() {
        return Err(KnError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(weights)
}

pub fn save_checkpoint(path: &Path, weights: &TransformerWeights) -> Result<()> {
    fs::write(path, encode(weights))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerWeights> {
    decode(&fs::read(path)?)
}
