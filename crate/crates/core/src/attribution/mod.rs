// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge attribution of FFN intermediate neurons.
//!
//! For a cloze query with answer `y`, the integrated-gradients score of
//! neuron `w_i` with observed activation `w̄_i` at the mask is
//!
//! ```text
//! Attr(w_i) = w̄_i / m · Σ_{k=1..m} ∂P(y | w = (k/m)·w̄) / ∂w_i
//! ```
//!
//! On the joint path every neuron of every layer at the mask moves along the
//! straight line from 0 to `w̄` together, so one backward pass per step yields
//! all partial derivatives and the scores sum to `P(w̄) − P(0)` as `m` grows.
//! On the independent path only `w_i` moves while all other mask-position
//! neurons stay pinned at `w̄`, which costs one pass per neuron and step.
//!
//! The activation baseline scores each neuron by `w̄_i` itself.

mod io;
mod refine;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};
use crate::model::{run_forward, ModelConfig, NeuronId, NeuronOverride, TransformerWeights};
use crate::tensor::OverrideMode;
use crate::vocab::ClozeQuery;

pub use io::{read_refined_sets, write_attribution_tsv, write_map_binary, read_map_binary, write_refined_sets};
pub use refine::{
    coarse_set, overlap_stats, refine_relation, CoarseSet, FactAttributions, KnowledgeNeuron,
    KnowledgeNeuronSet, OverlapStats, RefineConfig, RelationRefinement, StopReason,
};

/// Integration path for integrated gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgPath {
    #[default]
    Joint,
    Independent,
}

impl std::str::FromStr for IgPath {
    type Err = KnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(IgPath::Joint),
            "independent" => Ok(IgPath::Independent),
            _ => Err(KnError::Config(format!(
                "unknown IG path {s:?} (expected joint or independent)"
            ))),
        }
    }
}

/// Scores of every FFN neuron at the mask for one query, layer-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub fact: usize,
    pub template: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub scores: Vec<f32>,
    /// Unmodified activations `w̄` at the mask.
    pub activations: Vec<f32>,
}

impl AttributionMap {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score(&self, n: NeuronId) -> f32 {
        self.scores[n.flat(self.d_ffn)]
    }

    pub fn activation(&self, n: NeuronId) -> f32 {
        self.activations[n.flat(self.d_ffn)]
    }

    /// Neuron ids with their scores, layer-major.
    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, f32)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .map(|(k, &s)| (NeuronId::from_flat(k, self.d_ffn), s))
    }

    /// The `k` highest-scoring neurons, ties broken by lower id.
    pub fn top_k(&self, k: usize) -> Vec<(NeuronId, f32)> {
        let mut all: Vec<(NeuronId, f32)> = self.iter().collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    /// Sum of all scores, in `f64`.
    pub fn total(&self) -> f64 {
        self.scores.iter().map(|&s| f64::from(s)).sum()
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(k) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(KnError::Contract(format!(
                "non-finite attribution for neuron {}",
                NeuronId::from_flat(k, self.d_ffn)
            )));
        }
        Ok(())
    }
}

/// Forward rows per tape when integrating.
const IG_ROWS: usize = 50;

fn all_neurons(cfg: &ModelConfig) -> impl Iterator<Item = NeuronId> + '_ {
    (0..cfg.n_layers).flat_map(move |l| (0..cfg.d_ffn).map(move |i| NeuronId::new(l, i)))
}

/// Activations at the mask (layer-major) from one plain forward pass.
fn mask_activations(weights: &TransformerWeights, query: &ClozeQuery) -> Result<Vec<f32>> {
    query.validate(weights.config.vocab_size)?;
    let pass = run_forward(weights, &[(query.tokens.as_slice(), query.mask_pos)], &[], false, false)?;
    let d_ffn = weights.config.d_ffn;
    let row = pass.mask_rows[0];
    Ok(pass
        .activations
        .iter()
        .flat_map(|&a| pass.tape.value(a).data()[row * d_ffn..(row + 1) * d_ffn].to_vec())
        .collect())
}

/// One forward/backward over copies of `query`, copy `b` carrying
/// `overrides[b]`. Returns `∂P(answer)/∂w` at the mask for every neuron of
/// every copy, layer-major per copy.
fn neuron_gradients(
    weights: &TransformerWeights,
    query: &ClozeQuery,
    overrides: &[NeuronOverride],
) -> Result<Vec<Vec<f32>>> {
    let cfg = &weights.config;
    let seqs = vec![(query.tokens.as_slice(), query.mask_pos); overrides.len()];
    let refs: Vec<&NeuronOverride> = overrides.iter().collect();
    let mut pass = run_forward(weights, &seqs, &refs, false, true)?;
    let tape = &mut pass.tape;
    let probs = tape.softmax(pass.logits, 1)?;
    let picked = tape.pick_per_row(probs, &vec![query.answer as usize; overrides.len()])?;
    let total = tape.sum(picked);
    tape.backward(total)?;
    let d = cfg.d_ffn;
    let grads: Vec<&[f32]> = pass
        .neurons
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.data())
                .ok_or_else(|| KnError::Contract("tracked neurons received no gradient".into()))
        })
        .collect::<Result<_>>()?;
    Ok(pass
        .mask_rows
        .iter()
        .map(|&row| {
            grads
                .iter()
                .flat_map(|g| g[row * d..(row + 1) * d].iter().copied())
                .collect()
        })
        .collect())
}

/// Integrated-gradients attribution of every mask-position neuron.
pub fn attribute_ig(
    weights: &TransformerWeights,
    query: &ClozeQuery,
    m: usize,
    path: IgPath,
) -> Result<AttributionMap> {
    if m == 0 {
        return Err(KnError::Config("IG needs at least one step".into()));
    }
    let cfg = &weights.config;
    let wbar = mask_activations(weights, query)?;
    let n = wbar.len();
    let ids: Vec<NeuronId> = all_neurons(cfg).collect();
    let alpha = |k: usize| k as f32 / m as f32;
    let mut sums = vec![0.0f64; n];

    match path {
        IgPath::Joint => {
            let steps: Vec<usize> = (1..=m).collect();
            for chunk in steps.chunks(IG_ROWS) {
                let overrides: Vec<NeuronOverride> = chunk
                    .iter()
                    .map(|&k| {
                        let a = alpha(k);
                        let mut ov = NeuronOverride::new();
                        for (j, &id) in ids.iter().enumerate() {
                            ov.insert(id, OverrideMode::Set(a * wbar[j]));
                        }
                        ov
                    })
                    .collect();
                for g in neuron_gradients(weights, query, &overrides)? {
                    for (s, &gj) in sums.iter_mut().zip(&g) {
                        *s += f64::from(gj);
                    }
                }
            }
        }
        IgPath::Independent => {
            // Every other neuron is pinned at w̄ by setting it explicitly, so
            // downstream layers do not react to the moving neuron.
            let mut base = NeuronOverride::new();
            for (j, &id) in ids.iter().enumerate() {
                base.insert(id, OverrideMode::Set(wbar[j]));
            }
            // Neurons with w̄ = 0 score exactly 0 and are skipped.
            let jobs: Vec<(usize, usize)> = (0..n)
                .filter(|&j| wbar[j] != 0.0)
                .flat_map(|j| (1..=m).map(move |k| (j, k)))
                .collect();
            for chunk in jobs.chunks(IG_ROWS) {
                let overrides: Vec<NeuronOverride> = chunk
                    .iter()
                    .map(|&(j, k)| {
                        let mut ov = base.clone();
                        ov.insert(ids[j], OverrideMode::Set(alpha(k) * wbar[j]));
                        ov
                    })
                    .collect();
                for (g, &(j, _)) in neuron_gradients(weights, query, &overrides)?.iter().zip(chunk) {
                    sums[j] += f64::from(g[j]);
                }
            }
        }
    }

    let scores = wbar
        .iter()
        .zip(&sums)
        .map(|(&w, &s)| (f64::from(w) * s / m as f64) as f32)
        .collect();
    let map = AttributionMap {
        fact: query.fact,
        template: query.template,
        n_layers: cfg.n_layers,
        d_ffn: cfg.d_ffn,
        scores,
        activations: wbar,
    };
    map.check_finite()?;
    Ok(map)
}

/// Activation baseline: each neuron's score is its activation at the mask.
/// Gradient-free.
pub fn attribute_baseline(weights: &TransformerWeights, query: &ClozeQuery) -> Result<AttributionMap> {
    let wbar = mask_activations(weights, query)?;
    Ok(AttributionMap {
        fact: query.fact,
        template: query.template,
        n_layers: weights.config.n_layers,
        d_ffn: weights.config.d_ffn,
        scores: wbar.clone(),
        activations: wbar,
    })
}

/// Attribution method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ig { steps: usize, path: IgPath },
    Baseline,
}

/// Attributes many queries in parallel; results are in input order.
pub fn attribute_all(
    weights: &TransformerWeights,
    queries: &[ClozeQuery],
    method: Method,
) -> Result<Vec<AttributionMap>> {
    queries
        .par_iter()
        .map(|q| match method {
            Method::Ig { steps, path } => attribute_ig(weights, q, steps, path),
            Method::Baseline => attribute_baseline(weights, q),
        })
        .collect()
}
