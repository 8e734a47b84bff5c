// SPDX-License-Identifier: MIT OR Apache-2.0

//! Destructive edits through FFN value slots.
//!
//! Updating `⟨h, r, t⟩` to `⟨h, r, t′⟩` rewrites the value slot of each
//! selected knowledge neuron as `slot − λ₁·E[t] + λ₂·E[t′]`, where `E` is the
//! (tied) token embedding table. Erasing a relation zeroes the slots of the
//! neurons that appear in the most refined sets of that relation.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::KnowledgeNeuronSet;
use crate::error::{KnError, Result};
use crate::facts::World;
use crate::model::{forward_cloze_batch, NeuronId, TransformerWeights};
use crate::trainer::{evaluate, GroupEval};
use crate::vocab::ClozeQuery;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRequest {
    pub fact: usize,
    /// Entity id of the new tail.
    pub target: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    /// Neurons in at least this fraction of the relation's refined sets are
    /// left alone.
    pub sharing_cap: f64,
}

impl UpdateRequest {
    pub fn new(fact: usize, target: usize) -> Self {
        Self {
            fact,
            target,
            lambda1: 1.0,
            lambda2: 8.0,
            sharing_cap: 0.10,
        }
    }

    fn validate(&self, world: &World) -> Result<()> {
        let fact = world
            .facts
            .get(self.fact)
            .ok_or_else(|| KnError::Request(format!("fact {} out of range", self.fact)))?;
        let target = world
            .entities
            .get(self.target)
            .ok_or_else(|| KnError::Request(format!("entity {} out of range", self.target)))?;
        if self.target == fact.tail {
            return Err(KnError::Request("target equals the current tail".into()));
        }
        let tail_type = world.entities[fact.tail].kind;
        if target.kind != tail_type {
            return Err(KnError::Request(format!(
                "target {} is a {:?}, the tail is a {:?}",
                target.name, target.kind, tail_type
            )));
        }
        world.entity_token(self.target)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EraseRequest {
    pub relation: usize,
    pub budget: usize,
}

impl EraseRequest {
    pub fn new(relation: usize) -> Self {
        Self { relation, budget: 20 }
    }
}

/// Saved value slots for undoing an edit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditSession {
    saved: Option<Vec<(NeuronId, Vec<f32>)>>,
}

impl EditSession {
    pub fn new() -> Self {
        Self::default()
    }

    /// Saves the current value slots of `ids`, replacing any earlier snapshot.
    pub fn snapshot(&mut self, weights: &TransformerWeights, ids: &[NeuronId]) -> Result<()> {
        let rows = ids
            .iter()
            .map(|&n| Ok((n, weights.read_value_slot(n)?)))
            .collect::<Result<_>>()?;
        self.saved = Some(rows);
        Ok(())
    }

    /// Writes the saved slots back. Restoring twice is harmless.
    pub fn restore(&self, weights: &mut TransformerWeights) -> Result<()> {
        let rows = self
            .saved
            .as_ref()
            .ok_or_else(|| KnError::Contract("restore without a snapshot".into()))?;
        for (n, row) in rows {
            weights.write_value_slot(*n, row)?;
        }
        Ok(())
    }

    pub fn saved_ids(&self) -> Vec<NeuronId> {
        self.saved.iter().flatten().map(|(n, _)| *n).collect()
    }

    /// Number of stored floats.
    pub fn stored_floats(&self) -> usize {
        self.saved.iter().flatten().map(|(_, r)| r.len()).sum()
    }
}

/// Value-slot rows that differ between two models, plus the number of other
/// tensors that differ at all.
pub fn weight_diff(a: &TransformerWeights, b: &TransformerWeights) -> (Vec<NeuronId>, usize) {
    let mut rows = Vec::new();
    for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        for i in 0..a.config.d_ffn {
            let (ra, rb) = (la.ffn_value.row(i), lb.ffn_value.row(i));
            if ra.iter().zip(rb).any(|(x, y)| x.to_bits() != y.to_bits()) {
                rows.push(NeuronId::new(l, i));
            }
        }
    }
    let others = a
        .named_tensors()
        .iter()
        .zip(b.named_tensors())
        .filter(|((name, _), _)| !name.ends_with("ffn.value.weight"))
        .filter(|((_, ta), (_, tb))| {
            ta.data().iter().zip(tb.data()).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .count();
    (rows, others)
}

/// Prompts an edit is judged on.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    /// Prompts of the edited fact (updates) or relation (erasure).
    pub own: Vec<ClozeQuery>,
    /// Prompts of other facts of the same relation.
    pub intra: Vec<ClozeQuery>,
    /// Prompts of other relations.
    pub inter: Vec<ClozeQuery>,
}

impl EvalSet {
    /// All queries of the world split around one fact. `stride` keeps every
    /// `stride`-th query of the intra and inter groups.
    pub fn for_fact(world: &World, fact: usize, stride: usize) -> Result<Self> {
        let relation = world.facts.get(fact).ok_or_else(|| KnError::Index(format!("fact {fact} out of range")))?.relation;
        let mut set = Self::default();
        let (mut ni, mut nx) = (0usize, 0usize);
        for q in world.queries()? {
            if q.fact == fact {
                set.own.push(q);
            } else if world.facts[q.fact].relation == relation {
                if ni % stride.max(1) == 0 {
                    set.intra.push(q);
                }
                ni += 1;
            } else {
                if nx % stride.max(1) == 0 {
                    set.inter.push(q);
                }
                nx += 1;
            }
        }
        Ok(set)
    }

    /// All queries of the world split around one relation (`intra` empty).
    pub fn for_relation(world: &World, relation: usize, stride: usize) -> Result<Self> {
        let mut set = Self::default();
        let (mut no, mut nx) = (0usize, 0usize);
        for q in world.queries()? {
            if world.facts[q.fact].relation == relation {
                if no % stride.max(1) == 0 {
                    set.own.push(q);
                }
                no += 1;
            } else {
                if nx % stride.max(1) == 0 {
                    set.inter.push(q);
                }
                nx += 1;
            }
        }
        Ok(set)
    }
}

/// Perplexity before and after an edit, absolute and relative increase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplDelta {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
    pub rel_delta: f64,
}

impl PplDelta {
    fn new(before: GroupEval, after: GroupEval) -> Self {
        Self {
            before: before.perplexity,
            after: after.perplexity,
            delta: after.perplexity - before.perplexity,
            rel_delta: (after.perplexity - before.perplexity) / before.perplexity,
        }
    }
}

fn ppl(weights: &TransformerWeights, queries: &[ClozeQuery], world: &World) -> Result<GroupEval> {
    if queries.is_empty() {
        return Ok(GroupEval {
            n: 0,
            accuracy: f64::NAN,
            perplexity: f64::NAN,
        });
    }
    Ok(evaluate(weights, queries, &world.fact_relations())?.overall)
}

/// Outcome of updating one fact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub fact: usize,
    pub target: usize,
    /// The top prediction is no longer the old tail on most prompts.
    pub changed: bool,
    /// The new tail is the top prediction on most prompts.
    pub success: bool,
    /// Mean probability of the old tail before and after.
    pub p_old: (f64, f64),
    /// Mean probability of the new tail before and after.
    pub p_new: (f64, f64),
    /// On every prompt the new tail's probability rose and the old tail's
    /// fell.
    pub directional: bool,
    pub edited: Vec<NeuronId>,
    pub rows_changed: usize,
    pub intra: PplDelta,
    pub inter: PplDelta,
}

/// Keeps neurons of the fact's set that are in fewer than `cap` of the
/// relation's refined sets (the fact's own set included).
pub fn filter_shared(
    fact_set: &KnowledgeNeuronSet,
    relation_sets: &[KnowledgeNeuronSet],
    cap: f64,
) -> Vec<NeuronId> {
    let peers: Vec<&KnowledgeNeuronSet> = relation_sets
        .iter()
        .filter(|s| s.relation == fact_set.relation)
        .collect();
    let n = peers.len().max(1) as f64;
    fact_set
        .ids()
        .into_iter()
        .filter(|id| {
            let k = peers.iter().filter(|s| s.neurons.iter().any(|m| m.id == *id)).count();
            (k as f64) / n < cap
        })
        .collect()
}

fn majority(flags: impl Iterator<Item = bool>) -> bool {
    let (yes, n) = flags.fold((0, 0), |(y, n), f| (y + usize::from(f), n + 1));
    2 * yes > n
}

/// Applies `slot − λ₁·E[t] + λ₂·E[t′]` to `neurons` and measures the result.
/// The edit stays in `weights`; `session` holds the original rows.
pub fn update_with_neurons(
    weights: &mut TransformerWeights,
    world: &World,
    req: &UpdateRequest,
    neurons: &[NeuronId],
    eval: &EvalSet,
    session: &mut EditSession,
) -> Result<UpdateOutcome> {
    req.validate(world)?;
    let fact = world.facts[req.fact];
    let old_tok = world.entity_token(fact.tail)?;
    let new_tok = world.entity_token(req.target)?;
    let before_w = weights.clone();
    let own_before = forward_cloze_batch(weights, &eval.own, &[])?;
    let intra_before = ppl(weights, &eval.intra, world)?;
    let inter_before = ppl(weights, &eval.inter, world)?;

    session.snapshot(weights, neurons)?;
    let e_old = weights.embedding(old_tok)?.to_vec();
    let e_new = weights.embedding(new_tok)?.to_vec();
    for &n in neurons {
        let mut row = weights.read_value_slot(n)?;
        // Zero coefficients are skipped so a null edit is bit-exact, even on
        // negative-zero entries.
        for ((v, a), b) in row.iter_mut().zip(&e_old).zip(&e_new) {
            if req.lambda1 != 0.0 {
                *v -= req.lambda1 * a;
            }
            if req.lambda2 != 0.0 {
                *v += req.lambda2 * b;
            }
        }
        weights.write_value_slot(n, &row)?;
    }

    let own_after = forward_cloze_batch(weights, &eval.own, &[])?;
    let mean = |outs: &[crate::model::ClozeOutput], tok: u32| {
        outs.iter().map(|o| f64::from(o.distribution[tok as usize])).sum::<f64>() / outs.len().max(1) as f64
    };
    let (rows, others) = weight_diff(&before_w, weights);
    debug_assert_eq!(others, 0);
    Ok(UpdateOutcome {
        fact: req.fact,
        target: req.target,
        changed: majority(own_after.iter().map(|o| o.top_token() != old_tok)),
        success: majority(own_after.iter().map(|o| o.top_token() == new_tok)),
        p_old: (mean(&own_before, old_tok), mean(&own_after, old_tok)),
        p_new: (mean(&own_before, new_tok), mean(&own_after, new_tok)),
        directional: own_before.iter().zip(&own_after).all(|(b, a)| {
            a.distribution[new_tok as usize] > b.distribution[new_tok as usize]
                && a.distribution[old_tok as usize] < b.distribution[old_tok as usize]
        }),
        edited: neurons.to_vec(),
        rows_changed: rows.len(),
        intra: PplDelta::new(intra_before, ppl(weights, &eval.intra, world)?),
        inter: PplDelta::new(inter_before, ppl(weights, &eval.inter, world)?),
    })
}

/// Updates one fact through its knowledge neurons that are rarely shared
/// within the relation. With no surviving neuron the weights are left alone
/// and the outcome reports neither change nor success.
pub fn update_fact(
    weights: &mut TransformerWeights,
    world: &World,
    req: &UpdateRequest,
    fact_set: &KnowledgeNeuronSet,
    relation_sets: &[KnowledgeNeuronSet],
    eval: &EvalSet,
    session: &mut EditSession,
) -> Result<UpdateOutcome> {
    req.validate(world)?;
    if fact_set.fact != req.fact {
        return Err(KnError::Request(format!(
            "neuron set of fact {} given for fact {}",
            fact_set.fact, req.fact
        )));
    }
    let neurons = filter_shared(fact_set, relation_sets, req.sharing_cap);
    if neurons.is_empty() {
        log::warn!("fact {}: no knowledge neuron below the sharing cap", req.fact);
        let nan = PplDelta {
            before: f64::NAN,
            after: f64::NAN,
            delta: 0.0,
            rel_delta: 0.0,
        };
        session.snapshot(weights, &[])?;
        return Ok(UpdateOutcome {
            fact: req.fact,
            target: req.target,
            changed: false,
            success: false,
            p_old: (f64::NAN, f64::NAN),
            p_new: (f64::NAN, f64::NAN),
            directional: false,
            edited: Vec::new(),
            rows_changed: 0,
            intra: nan,
            inter: nan,
        });
    }
    update_with_neurons(weights, world, req, &neurons, eval, session)
}

/// `n` update requests for distinct facts drawn from `facts`, each with a
/// uniformly drawn target of the tail's type other than the tail. Sorted by
/// fact.
pub fn sample_update_requests(world: &World, facts: &[usize], n: usize, seed: u64) -> Result<Vec<UpdateRequest>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = sample(&mut rng, facts.len(), n.min(facts.len()))
        .into_iter()
        .map(|k| facts[k])
        .collect();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|f| {
            let fact = world
                .facts
                .get(f)
                .ok_or_else(|| KnError::Request(format!("fact {f} out of range")))?;
            let kind = world.entities[fact.tail].kind;
            let pool: Vec<usize> = world.entities_of(kind).map(|e| e.id).filter(|&e| e != fact.tail).collect();
            let target = *pool
                .choose(&mut rng)
                .ok_or_else(|| KnError::Request(format!("no other {kind:?} to update fact {f} to")))?;
            Ok(UpdateRequest::new(f, target))
        })
        .collect()
}

/// Change and success rates over many updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub n: usize,
    pub change_rate: f64,
    pub success_rate: f64,
    pub intra_delta: f64,
    pub inter_delta: f64,
    pub intra_rel_delta: f64,
    pub inter_rel_delta: f64,
}

pub fn summarize_updates(outcomes: &[UpdateOutcome]) -> UpdateSummary {
    let n = outcomes.len();
    let rate = |f: &dyn Fn(&UpdateOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n.max(1) as f64;
    let edited: Vec<&UpdateOutcome> = outcomes.iter().filter(|o| !o.edited.is_empty()).collect();
    let mean = |f: &dyn Fn(&UpdateOutcome) -> f64| {
        edited.iter().map(|o| f(o)).sum::<f64>() / edited.len().max(1) as f64
    };
    UpdateSummary {
        n,
        change_rate: rate(&|o| o.changed),
        success_rate: rate(&|o| o.success),
        intra_delta: mean(&|o| o.intra.delta),
        inter_delta: mean(&|o| o.inter.delta),
        intra_rel_delta: mean(&|o| o.intra.rel_delta),
        inter_rel_delta: mean(&|o| o.inter.rel_delta),
    }
}

/// Outcome of erasing one relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraseOutcome {
    pub relation: usize,
    pub edited: Vec<NeuronId>,
    pub rows_changed: usize,
    /// Perplexity on the erased relation's prompts.
    pub erased: PplDelta,
    /// Perplexity on all other relations' prompts.
    pub others: PplDelta,
}

impl EraseOutcome {
    /// Relative perplexity increase on the erased relation divided by the
    /// increase on the others.
    pub fn specificity(&self) -> f64 {
        self.erased.rel_delta / self.others.rel_delta
    }
}

/// Neurons of a relation ranked by how many of its facts' refined sets
/// contain them, then by mean attribution, then by id.
pub fn rank_relation_neurons(relation: usize, sets: &[KnowledgeNeuronSet]) -> Vec<(NeuronId, usize, f64)> {
    let mut tally: BTreeMap<NeuronId, (usize, f64)> = BTreeMap::new();
    for s in sets.iter().filter(|s| s.relation == relation) {
        for n in &s.neurons {
            let e = tally.entry(n.id).or_default();
            e.0 += 1;
            e.1 += n.mean_score;
        }
    }
    let mut ranked: Vec<(NeuronId, usize, f64)> = tally
        .into_iter()
        .map(|(id, (c, s))| (id, c, s / c as f64))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
    ranked
}

/// Zeroes the value slots of the relation's `budget` most frequent knowledge
/// neurons and measures perplexity on the relation and on the others.
pub fn erase_relation(
    weights: &mut TransformerWeights,
    world: &World,
    req: &EraseRequest,
    sets: &[KnowledgeNeuronSet],
    eval: &EvalSet,
    session: &mut EditSession,
) -> Result<EraseOutcome> {
    if req.budget == 0 {
        return Err(KnError::Request("erase budget must be at least 1".into()));
    }
    if req.relation >= world.relations.len() {
        return Err(KnError::Request(format!("relation {} out of range", req.relation)));
    }
    let ranked = rank_relation_neurons(req.relation, sets);
    if ranked.is_empty() {
        return Err(KnError::Request(format!(
            "relation {} has no refined knowledge neurons",
            req.relation
        )));
    }
    if ranked.len() < req.budget {
        log::warn!(
            "relation {}: only {} distinct knowledge neurons for a budget of {}",
            req.relation,
            ranked.len(),
            req.budget
        );
    }
    let neurons: Vec<NeuronId> = ranked.iter().take(req.budget).map(|r| r.0).collect();
    let before_w = weights.clone();
    let own_before = ppl(weights, &eval.own, world)?;
    let other_before = ppl(weights, &eval.inter, world)?;
    session.snapshot(weights, &neurons)?;
    let zero = vec![0.0; weights.config.d_model];
    for &n in &neurons {
        weights.write_value_slot(n, &zero)?;
    }
    let (rows, _) = weight_diff(&before_w, weights);
    Ok(EraseOutcome {
        relation: req.relation,
        edited: neurons,
        rows_changed: rows.len(),
        erased: PplDelta::new(own_before, ppl(weights, &eval.own, world)?),
        others: PplDelta::new(other_before, ppl(weights, &eval.inter, world)?),
    })
}

/// One edit-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditLogRecord {
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub op: String,
    pub neurons: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    pub summary: BTreeMap<String, f64>,
}

impl EditLogRecord {
    pub fn new(op: &str, neurons: &[NeuronId]) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            timestamp,
            op: op.to_owned(),
            neurons: neurons.iter().map(|n| (n.layer, n.index)).collect(),
            lambda1: None,
            lambda2: None,
            budget: None,
            summary: BTreeMap::new(),
        }
    }
}

/// Appends one JSON line to the edit log.
pub fn append_edit_log(path: &Path, record: &EditLogRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}
