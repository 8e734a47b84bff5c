// SPDX-License-Identifier: MIT OR Apache-2.0

//! Non-destructive experiments on knowledge neurons: suppressing or
//! amplifying their activations at the mask, and measuring how strongly
//! different prompt types activate them. Weights are only read.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::attribution::KnowledgeNeuronSet;
use crate::error::{KnError, Result};
use crate::facts::PromptGroups;
use crate::model::{forward_cloze_batch, NeuronId, NeuronOverride, OverrideMode, TransformerWeights};
use crate::vocab::ClozeQuery;

/// Facts whose mean answer probability is below this are left out of
/// relative-change averages.
pub const MIN_BEFORE_PROB: f64 = 0.01;

/// Random control sets drawn per fact.
pub const RANDOM_RESAMPLES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Activations set to 0.
    Suppress,
    /// Activations doubled.
    Amplify,
}

impl Mode {
    pub fn override_mode(self) -> OverrideMode {
        match self {
            Mode::Suppress => OverrideMode::Set(0.0),
            Mode::Amplify => OverrideMode::Scale(2.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Suppress => "suppress",
            Mode::Amplify => "amplify",
        }
    }
}

/// Answer probability of one prompt without and with the intervention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEffect {
    pub fact: usize,
    pub template: usize,
    pub before: f32,
    pub after: f32,
}

/// Answer probabilities of `prompts` before and after applying `overrides`
/// at the mask of each.
pub fn probe_with_override(
    weights: &TransformerWeights,
    prompts: &[ClozeQuery],
    overrides: &NeuronOverride,
) -> Result<Vec<PromptEffect>> {
    let before = forward_cloze_batch(weights, prompts, &[])?;
    let refs = vec![overrides; prompts.len()];
    let after = forward_cloze_batch(weights, prompts, &refs)?;
    Ok(prompts
        .iter()
        .zip(before.iter().zip(&after))
        .map(|(q, (b, a))| PromptEffect {
            fact: q.fact,
            template: q.template,
            before: b.answer_prob,
            after: a.answer_prob,
        })
        .collect())
}

/// Suppresses or amplifies `neurons` on every prompt.
pub fn suppress_or_amplify(
    weights: &TransformerWeights,
    prompts: &[ClozeQuery],
    neurons: &[NeuronId],
    mode: Mode,
) -> Result<Vec<PromptEffect>> {
    if neurons.is_empty() {
        return Err(KnError::Contract("intervention on an empty neuron set".into()));
    }
    let ov = NeuronOverride::uniform(neurons.iter().copied(), mode.override_mode());
    probe_with_override(weights, prompts, &ov)
}

/// `RANDOM_RESAMPLES` random sets matching `neurons` layer by layer: for each
/// member, a distinct index of the same layer outside `neurons`.
pub fn random_controls(
    neurons: &[NeuronId],
    d_ffn: usize,
    seed: u64,
) -> Result<Vec<Vec<NeuronId>>> {
    let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
    for n in neurons {
        *per_layer.entry(n.layer).or_default() += 1;
    }
    let excluded: BTreeSet<NeuronId> = neurons.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..RANDOM_RESAMPLES)
        .map(|_| {
            let mut set = Vec::with_capacity(neurons.len());
            for (&layer, &count) in &per_layer {
                let pool: Vec<usize> = (0..d_ffn)
                    .filter(|&i| !excluded.contains(&NeuronId::new(layer, i)))
                    .collect();
                if pool.len() < count {
                    return Err(KnError::Contract(format!(
                        "layer {layer} has too few neurons for a random control of size {count}"
                    )));
                }
                set.extend(sample(&mut rng, pool.len(), count).iter().map(|k| NeuronId::new(layer, pool[k])));
            }
            set.sort_unstable();
            Ok(set)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronSource {
    Ig,
    Baseline,
    Random,
}

impl NeuronSource {
    pub fn name(self) -> &'static str {
        match self {
            NeuronSource::Ig => "ig",
            NeuronSource::Baseline => "baseline",
            NeuronSource::Random => "random",
        }
    }
}

/// Fact-level outcome of one intervention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactEffect {
    pub fact: usize,
    pub relation: usize,
    pub source: NeuronSource,
    pub mode: Mode,
    pub n_neurons: usize,
    /// Mean answer probability over the fact's prompts.
    pub before: f64,
    pub after: f64,
    /// `(after − before) / before`; for random controls the mean over
    /// resamples.
    pub rel_change: f64,
    /// Whether `before` clears [`MIN_BEFORE_PROB`].
    pub included: bool,
}

fn mean_probs(effects: &[PromptEffect]) -> (f64, f64) {
    let n = effects.len() as f64;
    let b = effects.iter().map(|e| f64::from(e.before)).sum::<f64>() / n;
    let a = effects.iter().map(|e| f64::from(e.after)).sum::<f64>() / n;
    (b, a)
}

/// Runs one neuron source and mode on one fact.
fn fact_effect(
    weights: &TransformerWeights,
    prompts: &[ClozeQuery],
    relation: usize,
    source: NeuronSource,
    sets: &[Vec<NeuronId>],
    mode: Mode,
) -> Result<FactEffect> {
    let mut before = 0.0;
    let mut afters = Vec::with_capacity(sets.len());
    let mut rels = Vec::with_capacity(sets.len());
    for s in sets {
        let (b, a) = mean_probs(&suppress_or_amplify(weights, prompts, s, mode)?);
        before = b;
        afters.push(a);
        rels.push((a - b) / b);
    }
    let k = sets.len() as f64;
    Ok(FactEffect {
        fact: prompts[0].fact,
        relation,
        source,
        mode,
        n_neurons: sets[0].len(),
        before,
        after: afters.iter().sum::<f64>() / k,
        rel_change: rels.iter().sum::<f64>() / k,
        included: before >= MIN_BEFORE_PROB,
    })
}

/// Per-relation aggregate of one (source, mode).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationEffect {
    pub relation: usize,
    pub mode: Mode,
    pub source: NeuronSource,
    pub mean_rel_change: f64,
    pub n_facts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub facts: Vec<FactEffect>,
    pub relations: Vec<RelationEffect>,
    /// Facts left out of the averages because their before probability is
    /// below [`MIN_BEFORE_PROB`].
    pub excluded: usize,
}

impl InterventionReport {
    /// Mean relative change over included facts.
    pub fn mean_change(&self, source: NeuronSource, mode: Mode) -> f64 {
        let v: Vec<f64> = self.included(source, mode).map(|f| f.rel_change).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn included(&self, source: NeuronSource, mode: Mode) -> impl Iterator<Item = &FactEffect> {
        self.facts
            .iter()
            .filter(move |f| f.source == source && f.mode == mode && f.included)
    }

    /// Sign test of IG against random suppression across facts.
    pub fn suppression_sign_test(&self) -> SignTest {
        let random: BTreeMap<usize, f64> = self
            .included(NeuronSource::Random, Mode::Suppress)
            .map(|f| (f.fact, f.rel_change))
            .collect();
        let diffs: Vec<f64> = self
            .included(NeuronSource::Ig, Mode::Suppress)
            .filter_map(|f| random.get(&f.fact).map(|r| f.rel_change - r))
            .collect();
        sign_test(&diffs)
    }

    /// Fraction of facts where suppression and amplification of the IG set
    /// move the answer probability in opposite directions.
    pub fn opposite_direction_fraction(&self) -> f64 {
        let amp: BTreeMap<usize, f64> = self
            .included(NeuronSource::Ig, Mode::Amplify)
            .map(|f| (f.fact, f.rel_change))
            .collect();
        let pairs: Vec<bool> = self
            .included(NeuronSource::Ig, Mode::Suppress)
            .filter_map(|f| amp.get(&f.fact).map(|a| f.rel_change * a < 0.0))
            .collect();
        pairs.iter().filter(|&&b| b).count() as f64 / pairs.len() as f64
    }
}

/// Two-sided sign test of the hypothesis that differences are equally
/// likely to be positive or negative. Zero differences are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub negative: usize,
    pub positive: usize,
    pub p_value: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let negative = diffs.iter().filter(|&&d| d < 0.0).count();
    let positive = diffs.iter().filter(|&&d| d > 0.0).count();
    let n = (negative + positive) as u64;
    let p_value = if n == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).expect("valid binomial");
        let k = negative.min(positive) as u64;
        (2.0 * bin.cdf(k)).min(1.0)
    };
    SignTest {
        negative,
        positive,
        p_value,
    }
}

/// Knowledge-neuron sets and prompts of one fact.
#[derive(Clone, Debug)]
pub struct FactSubject<'a> {
    pub fact: usize,
    pub relation: usize,
    pub prompts: &'a [ClozeQuery],
    pub ig: &'a KnowledgeNeuronSet,
    pub baseline: Option<&'a KnowledgeNeuronSet>,
}

/// Suppression and amplification with IG, baseline, and size-matched random
/// sets. Facts with an empty set for a source are skipped for that source.
pub fn intervention_study(
    weights: &TransformerWeights,
    subjects: &[FactSubject<'_>],
    seed: u64,
) -> Result<InterventionReport> {
    let d_ffn = weights.config.d_ffn;
    let per_fact: Vec<Vec<FactEffect>> = subjects
        .par_iter()
        .map(|s| {
            let mut out = Vec::new();
            let ig = s.ig.ids();
            if ig.is_empty() {
                return Ok(out);
            }
            let random = random_controls(&ig, d_ffn, seed ^ (s.fact as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            let mut sources = vec![(NeuronSource::Ig, vec![ig.clone()]), (NeuronSource::Random, random)];
            if let Some(b) = s.baseline.filter(|b| !b.is_empty()) {
                sources.push((NeuronSource::Baseline, vec![b.ids()]));
            }
            for (source, sets) in &sources {
                for mode in [Mode::Suppress, Mode::Amplify] {
                    out.push(fact_effect(weights, s.prompts, s.relation, *source, sets, mode)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let facts: Vec<FactEffect> = per_fact.into_iter().flatten().collect();
    let excluded = facts
        .iter()
        .filter(|f| f.source == NeuronSource::Ig && f.mode == Mode::Suppress && !f.included)
        .count();

    let mut groups: BTreeMap<(usize, Mode, NeuronSource), Vec<f64>> = BTreeMap::new();
    for f in facts.iter().filter(|f| f.included) {
        groups.entry((f.relation, f.mode, f.source)).or_default().push(f.rel_change);
    }
    let relations = groups
        .into_iter()
        .map(|((relation, mode, source), v)| RelationEffect {
            relation,
            mode,
            source,
            mean_rel_change: v.iter().sum::<f64>() / v.len() as f64,
            n_facts: v.len(),
        })
        .collect();
    Ok(InterventionReport {
        facts,
        relations,
        excluded,
    })
}

/// Mean activation of `neurons` at the mask over `prompts` (averaged per
/// prompt over the neurons, then over prompts).
pub fn mean_activation(
    weights: &TransformerWeights,
    prompts: &[ClozeQuery],
    neurons: &[NeuronId],
) -> Result<f64> {
    Ok(per_prompt_activation(weights, prompts, neurons)?.iter().sum::<f64>() / prompts.len() as f64)
}

fn per_prompt_activation(
    weights: &TransformerWeights,
    prompts: &[ClozeQuery],
    neurons: &[NeuronId],
) -> Result<Vec<f64>> {
    if neurons.is_empty() || prompts.is_empty() {
        return Err(KnError::Contract("activation of an empty neuron or prompt set".into()));
    }
    for n in neurons {
        n.check(&weights.config)?;
    }
    let outs = forward_cloze_batch(weights, prompts, &[])?;
    Ok(outs
        .iter()
        .map(|o| {
            neurons
                .iter()
                .map(|n| f64::from(o.activations[n.layer][n.index]))
                .sum::<f64>()
                / neurons.len() as f64
        })
        .collect())
}

/// Prompts in descending order of mean knowledge-neuron activation; ties keep
/// pool order. Returns `(pool index, mean activation)`.
pub fn rank_prompts_by_activation(
    weights: &TransformerWeights,
    neurons: &[NeuronId],
    pool: &[ClozeQuery],
) -> Result<Vec<(usize, f64)>> {
    let acts = per_prompt_activation(weights, pool, neurons)?;
    let mut ranked: Vec<(usize, f64)> = acts.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

/// Mean knowledge-neuron activation per prompt type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupActivation {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

impl GroupActivation {
    /// `(t1 − t2) / |t1|`: how much head-and-tail prompts out-activate
    /// head-only prompts, relative to the head-and-tail level.
    pub fn separation(&self) -> f64 {
        (self.t1 - self.t2) / self.t1.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub per_fact: Vec<(usize, NeuronSource, GroupActivation)>,
    pub ig: GroupActivation,
    pub baseline: Option<GroupActivation>,
    /// Mean activation of all neurons on random-token prompts.
    pub t3_population: f64,
    pub n_facts: usize,
}

/// Activation of each fact's IG (and baseline) neurons on its prompt groups.
pub fn activation_study(
    weights: &TransformerWeights,
    groups: &[PromptGroups],
    ig: &BTreeMap<usize, KnowledgeNeuronSet>,
    baseline: Option<&BTreeMap<usize, KnowledgeNeuronSet>>,
) -> Result<ActivationReport> {
    let measure = |g: &PromptGroups, set: &KnowledgeNeuronSet| -> Result<GroupActivation> {
        let ids = set.ids();
        Ok(GroupActivation {
            t1: mean_activation(weights, &g.t1, &ids)?,
            t2: mean_activation(weights, &g.t2, &ids)?,
            t3: mean_activation(weights, &g.t3, &ids)?,
        })
    };
    let rows: Vec<Vec<(usize, NeuronSource, GroupActivation)>> = groups
        .par_iter()
        .map(|g| {
            let mut out = Vec::new();
            if let Some(s) = ig.get(&g.fact).filter(|s| !s.is_empty()) {
                out.push((g.fact, NeuronSource::Ig, measure(g, s)?));
            }
            if let Some(s) = baseline.and_then(|b| b.get(&g.fact)).filter(|s| !s.is_empty()) {
                out.push((g.fact, NeuronSource::Baseline, measure(g, s)?));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let per_fact: Vec<_> = rows.into_iter().flatten().collect();
    let aggregate = |src: NeuronSource| -> Option<GroupActivation> {
        let v: Vec<&GroupActivation> = per_fact.iter().filter(|r| r.1 == src).map(|r| &r.2).collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        Some(GroupActivation {
            t1: v.iter().map(|g| g.t1).sum::<f64>() / n,
            t2: v.iter().map(|g| g.t2).sum::<f64>() / n,
            t3: v.iter().map(|g| g.t3).sum::<f64>() / n,
        })
    };
    let ig_agg = aggregate(NeuronSource::Ig)
        .ok_or_else(|| KnError::Contract("no fact has a non-empty knowledge-neuron set".into()))?;

    let t3: Vec<ClozeQuery> = groups.iter().flat_map(|g| g.t3.iter().cloned()).collect();
    let outs: Vec<Vec<f64>> = t3
        .par_chunks(crate::trainer::EVAL_CHUNK)
        .map(|c| {
            Ok(forward_cloze_batch(weights, c, &[])?
                .iter()
                .map(|o| {
                    let all: Vec<f32> = o.activations.concat();
                    all.iter().map(|&a| f64::from(a)).sum::<f64>() / all.len() as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = outs.into_iter().flatten().collect();
    let t3_population = flat.iter().sum::<f64>() / flat.len().max(1) as f64;

    let baseline_agg = aggregate(NeuronSource::Baseline);
    Ok(ActivationReport {
        n_facts: per_fact.iter().filter(|r| r.1 == NeuronSource::Ig).count(),
        per_fact,
        ig: ig_agg,
        baseline: baseline_agg,
        t3_population,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        // 10 of 10 negative: p = 2 · 0.5^10.
        let t = sign_test(&[-1.0; 10]);
        assert!((t.p_value - 2.0 * 0.5f64.powi(10)).abs() < 1e-12);
        // Balanced: p = 1.
        assert_eq!(sign_test(&[-1.0, 1.0]).p_value, 1.0);
        assert_eq!(sign_test(&[0.0, 0.0]).p_value, 1.0);
        // 2 of 8 positive: P(X ≤ 2) = (1 + 8 + 28) / 256.
        let t = sign_test(&[-1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0]);
        assert!((t.p_value - 2.0 * 37.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn random_controls_match_layers_and_avoid_the_set() {
        let set = vec![NeuronId::new(0, 1), NeuronId::new(2, 5), NeuronId::new(2, 6)];
        let controls = random_controls(&set, 8, 4).unwrap();
        assert_eq!(controls.len(), RANDOM_RESAMPLES);
        for c in &controls {
            assert_eq!(c.len(), 3);
            assert_eq!(c.iter().filter(|n| n.layer == 0).count(), 1);
            assert_eq!(c.iter().filter(|n| n.layer == 2).count(), 2);
            assert!(c.iter().all(|n| !set.contains(n)));
        }
        assert_eq!(controls, random_controls(&set, 8, 4).unwrap());
        assert!(random_controls(&[], 8, 0).unwrap().iter().all(Vec::is_empty));
        let full = vec![NeuronId::new(0, 0), NeuronId::new(0, 1)];
        assert!(random_controls(&full, 3, 0).is_err());
    }
}
