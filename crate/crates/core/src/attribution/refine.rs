// SPDX-License-Identifier: MIT OR Apache-2.0

//! Coarse sets, refinement into knowledge-neuron sets, and set overlap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AttributionMap;
use crate::error::{KnError, Result};
use crate::model::NeuronId;

/// Neurons of one prompt whose score exceeds `t_fraction · max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseSet {
    pub fact: usize,
    pub template: usize,
    pub threshold: f64,
    pub neurons: Vec<NeuronId>,
}

/// Keeps neurons scoring strictly above `t_fraction` times the (signed)
/// maximum score. Empty when no score is positive.
pub fn coarse_set(map: &AttributionMap, t_fraction: f32) -> Result<CoarseSet> {
    if map.is_empty() {
        return Err(KnError::Contract("empty attribution map".into()));
    }
    if !(t_fraction > 0.0 && t_fraction < 1.0) {
        return Err(KnError::Config(format!("t_fraction must be in (0, 1), got {t_fraction}")));
    }
    let max = map.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let threshold = f64::from(t_fraction) * f64::from(max);
    let neurons = if max > 0.0 {
        map.iter()
            .filter(|&(_, s)| f64::from(s) > threshold)
            .map(|(n, _)| n)
            .collect()
    } else {
        log::warn!(
            "fact {} template {}: no positive attribution, coarse set is empty",
            map.fact,
            map.template
        );
        Vec::new()
    };
    Ok(CoarseSet {
        fact: map.fact,
        template: map.template,
        threshold,
        neurons,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub t_fraction: f32,
    pub p_init: f64,
    pub p_step: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    pub ig_steps: usize,
    pub max_iterations: usize,
    /// Also search over `t_fraction` when `p` alone cannot reach the band.
    pub adapt_t: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            t_fraction: 0.2,
            p_init: 0.7,
            p_step: 0.05,
            band_lo: 2.0,
            band_hi: 5.0,
            ig_steps: 20,
            max_iterations: 40,
            adapt_t: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KnError::Config(m.into()));
        if !(self.t_fraction > 0.0 && self.t_fraction < 1.0) {
            return bad("t_fraction must be in (0, 1)");
        }
        if !(self.p_init > 0.0 && self.p_init <= 1.0) || !(self.p_step > 0.0) {
            return bad("p_init must be in (0, 1] and p_step positive");
        }
        if !(self.band_lo <= self.band_hi) {
            return bad("band lower bound exceeds upper bound");
        }
        if self.ig_steps == 0 || self.max_iterations == 0 {
            return bad("IG steps and iteration cap must be at least 1");
        }
        Ok(())
    }
}

/// All attribution maps of one fact (one per prompt).
#[derive(Clone, Debug)]
pub struct FactAttributions {
    pub fact: usize,
    pub relation: usize,
    pub maps: Vec<AttributionMap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeNeuron {
    pub id: NeuronId,
    /// Fraction of the fact's prompts whose coarse set contains the neuron.
    pub share: f64,
    /// Mean score over all of the fact's prompts.
    pub mean_score: f64,
}

/// Refined neurons of one fact, ordered by share, then mean score
/// (descending), then id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeNeuronSet {
    pub fact: usize,
    pub relation: usize,
    pub p: f64,
    pub t_fraction: f32,
    pub neurons: Vec<KnowledgeNeuron>,
}

impl KnowledgeNeuronSet {
    pub fn ids(&self) -> Vec<NeuronId> {
        self.neurons.iter().map(|n| n.id).collect()
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    InBand,
    /// `p` left `(0, 1]`.
    Bound,
    /// `p` returned to a value already tried.
    Oscillation,
    IterationCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRefinement {
    pub relation: usize,
    pub p: f64,
    pub t_fraction: f32,
    pub avg_size: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub sets: Vec<KnowledgeNeuronSet>,
}

impl RelationRefinement {
    pub fn in_band(&self) -> bool {
        self.stop == StopReason::InBand
    }
}

/// Per-fact counts of coarse-set membership.
struct Tally {
    fact: usize,
    /// (id, share, mean score) of every neuron in some coarse set.
    candidates: Vec<KnowledgeNeuron>,
}

fn tally(fa: &FactAttributions, t_fraction: f32) -> Result<Tally> {
    let n = fa.maps.len() as f64;
    let mut counts: BTreeMap<NeuronId, usize> = BTreeMap::new();
    for map in &fa.maps {
        for id in coarse_set(map, t_fraction)?.neurons {
            *counts.entry(id).or_default() += 1;
        }
    }
    let candidates = counts
        .into_iter()
        .map(|(id, c)| KnowledgeNeuron {
            id,
            share: c as f64 / n,
            mean_score: fa.maps.iter().map(|m| f64::from(m.score(id))).sum::<f64>() / n,
        })
        .collect();
    Ok(Tally {
        fact: fa.fact,
        candidates,
    })
}

fn sets_at(tallies: &[Tally], relation: usize, p: f64, t_fraction: f32) -> Vec<KnowledgeNeuronSet> {
    tallies
        .iter()
        .map(|t| {
            let mut neurons: Vec<KnowledgeNeuron> =
                t.candidates.iter().filter(|k| k.share > p).copied().collect();
            neurons.sort_by(|a, b| {
                b.share
                    .total_cmp(&a.share)
                    .then(b.mean_score.total_cmp(&a.mean_score))
                    .then(a.id.cmp(&b.id))
            });
            KnowledgeNeuronSet {
                fact: t.fact,
                relation,
                p,
                t_fraction,
                neurons,
            }
        })
        .collect()
}

fn band_distance(avg: f64, cfg: &RefineConfig) -> f64 {
    if avg < cfg.band_lo {
        cfg.band_lo - avg
    } else if avg > cfg.band_hi {
        avg - cfg.band_hi
    } else {
        0.0
    }
}

/// Searches `p` for one `t_fraction`; returns the in-band result or the
/// nearest-band one seen.
fn search_p(tallies: &[Tally], relation: usize, t_fraction: f32, cfg: &RefineConfig) -> RelationRefinement {
    let mut offset: i64 = 0;
    let mut tried = std::collections::BTreeSet::new();
    let mut best: Option<(f64, RelationRefinement)> = None;
    let mut stop = StopReason::IterationCap;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        // Recompute from the offset so repeated steps do not drift.
        let p = ((cfg.p_init + offset as f64 * cfg.p_step) * 1e9).round() / 1e9;
        if !(p > 0.0 && p <= 1.0) {
            stop = StopReason::Bound;
            break;
        }
        if !tried.insert(offset) {
            stop = StopReason::Oscillation;
            break;
        }
        iterations += 1;
        let sets = sets_at(tallies, relation, p, t_fraction);
        let avg = sets.iter().map(|s| s.len() as f64).sum::<f64>() / sets.len() as f64;
        let dist = band_distance(avg, cfg);
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((
                dist,
                RelationRefinement {
                    relation,
                    p,
                    t_fraction,
                    avg_size: avg,
                    iterations,
                    stop: StopReason::InBand,
                    sets,
                },
            ));
        }
        if dist == 0.0 {
            stop = StopReason::InBand;
            break;
        }
        offset += if avg > cfg.band_hi { 1 } else { -1 };
    }
    let (_, mut result) = best.expect("p_init is inside (0, 1]");
    result.iterations = iterations;
    result.stop = stop;
    result
}

/// Refines every fact of one relation, adapting `p` (and, with `adapt_t`,
/// the coarse threshold) until the average set size lies in the band.
pub fn refine_relation(facts: &[FactAttributions], cfg: &RefineConfig) -> Result<RelationRefinement> {
    cfg.validate()?;
    let Some(first) = facts.first() else {
        return Err(KnError::Contract("no facts to refine".into()));
    };
    let relation = first.relation;
    for fa in facts {
        if fa.relation != relation {
            return Err(KnError::Contract(format!(
                "facts of relations {relation} and {} refined together",
                fa.relation
            )));
        }
        if fa.maps.len() < 2 {
            return Err(KnError::Contract(format!(
                "fact {} has {} prompt(s); refinement needs at least 2",
                fa.fact,
                fa.maps.len()
            )));
        }
        if fa.maps.len() < crate::facts::MIN_TEMPLATES {
            log::warn!("fact {} has only {} prompts", fa.fact, fa.maps.len());
        }
    }

    let mut t_values = vec![cfg.t_fraction];
    if cfg.adapt_t {
        t_values.extend((1..20).map(|k| k as f32 * 0.05).filter(|&t| (t - cfg.t_fraction).abs() > 1e-6));
    }
    let mut best: Option<RelationRefinement> = None;
    for t in t_values {
        let tallies = facts.iter().map(|fa| tally(fa, t)).collect::<Result<Vec<_>>>()?;
        let r = search_p(&tallies, relation, t, cfg);
        if r.in_band() {
            return Ok(r);
        }
        let closer = best
            .as_ref()
            .is_none_or(|b| band_distance(r.avg_size, cfg) < band_distance(b.avg_size, cfg));
        if closer {
            best = Some(r);
        }
    }
    let result = best.expect("at least one threshold tried");
    log::warn!(
        "relation {relation}: average set size {:.2} outside [{}, {}] (stopped: {:?}, p = {:.2}, t = {:.2})",
        result.avg_size,
        cfg.band_lo,
        cfg.band_hi,
        result.stop,
        result.p,
        result.t_fraction
    );
    Ok(result)
}

/// Average set size and mean pairwise intersections within and across
/// relations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub n_facts: usize,
    pub avg_size: f64,
    pub intra: f64,
    pub inter: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

fn intersection(a: &[NeuronId], b: &[NeuronId]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Pair means are NaN when there are no pairs of that kind.
pub fn overlap_stats(sets: &[KnowledgeNeuronSet]) -> OverlapStats {
    let sorted: Vec<(usize, Vec<NeuronId>)> = sets
        .iter()
        .map(|s| {
            let mut ids = s.ids();
            ids.sort_unstable();
            (s.relation, ids)
        })
        .collect();
    let (mut intra, mut inter) = ((0usize, 0usize), (0usize, 0usize));
    for (a, (ra, ia)) in sorted.iter().enumerate() {
        for (rb, ib) in &sorted[a + 1..] {
            let k = intersection(ia, ib);
            let acc = if ra == rb { &mut intra } else { &mut inter };
            acc.0 += k;
            acc.1 += 1;
        }
    }
    let mean = |(sum, n): (usize, usize)| if n == 0 { f64::NAN } else { sum as f64 / n as f64 };
    OverlapStats {
        n_facts: sets.len(),
        avg_size: if sets.is_empty() {
            f64::NAN
        } else {
            sets.iter().map(|s| s.len() as f64).sum::<f64>() / sets.len() as f64
        },
        intra: mean(intra),
        inter: mean(inter),
        intra_pairs: intra.1,
        inter_pairs: inter.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(scores: Vec<f32>) -> AttributionMap {
        AttributionMap {
            fact: 0,
            template: 0,
            n_layers: 1,
            d_ffn: scores.len(),
            activations: scores.clone(),
            scores,
        }
    }

    #[test]
    fn coarse_threshold_examples() {
        let m = map(vec![10.0, 3.0, 1.0]);
        let ids = |c: CoarseSet| c.neurons.iter().map(|n| n.index).collect::<Vec<_>>();
        assert_eq!(ids(coarse_set(&m, 0.2).unwrap()), vec![0, 1]);
        assert_eq!(ids(coarse_set(&m, 0.999).unwrap()), vec![0]);
        assert_eq!(ids(coarse_set(&map(vec![2.0; 5]), 0.2).unwrap()).len(), 5);
        assert!(coarse_set(&map(vec![-1.0, 0.0]), 0.2).unwrap().neurons.is_empty());
        // Exactly at the threshold is not "greater than".
        assert_eq!(ids(coarse_set(&map(vec![10.0, 2.0]), 0.2).unwrap()), vec![0]);
        assert!(coarse_set(&map(vec![1.0]), 1.0).is_err());
    }

    fn fact_with(counts: &[(usize, usize)], n_prompts: usize) -> FactAttributions {
        // Neuron `i` is in the coarse set of the first `c` prompts.
        let d = 16;
        let maps = (0..n_prompts)
            .map(|p| {
                let mut s = vec![0.0; d];
                s[d - 1] = 1.0;
                for &(i, c) in counts {
                    if p < c {
                        s[i] = 1.0;
                    }
                }
                map(s)
            })
            .collect();
        FactAttributions {
            fact: 0,
            relation: 0,
            maps,
        }
    }

    #[test]
    fn share_threshold_is_strict() {
        let fa = fact_with(&[(0, 8), (1, 6)], 9);
        let t = tally(&fa, 0.2).unwrap();
        let sets = sets_at(&[t], 0, 0.7, 0.2);
        let ids: Vec<usize> = sets[0].neurons.iter().map(|n| n.id.index).collect();
        // Neuron 15 is in every coarse set, 0 in 8/9, 1 in 6/9 < 0.7.
        assert_eq!(ids, vec![15, 0]);
    }

    #[test]
    fn single_prompt_is_refused() {
        let fa = fact_with(&[(0, 1)], 1);
        assert!(matches!(
            refine_relation(&[fa], &RefineConfig::default()),
            Err(KnError::Contract(_))
        ));
    }

    #[test]
    fn p_moves_towards_the_band() {
        // 9 prompts, neurons in 9, 8, 7, 6, 5, 4, 3 coarse sets.
        let fa = fact_with(&[(0, 9), (1, 8), (2, 7), (3, 6), (4, 5), (5, 4), (6, 3)], 9);
        let cfg = RefineConfig {
            band_lo: 5.0,
            band_hi: 6.0,
            ..RefineConfig::default()
        };
        let r = refine_relation(&[fa], &cfg).unwrap();
        assert!(r.in_band());
        assert!(r.p < 0.7);
        assert!((5.0..=6.0).contains(&r.avg_size));
    }

    #[test]
    fn unreachable_band_stops_with_reason() {
        let fa = fact_with(&[], 4);
        let r = refine_relation(&[fa], &RefineConfig::default()).unwrap();
        assert!(!r.in_band());
        assert_ne!(r.stop, StopReason::InBand);
        assert!(r.iterations <= 40);
    }

    #[test]
    fn overlap_of_identical_and_disjoint_sets() {
        let set = |fact, relation, ids: &[usize]| KnowledgeNeuronSet {
            fact,
            relation,
            p: 0.7,
            t_fraction: 0.2,
            neurons: ids
                .iter()
                .map(|&i| KnowledgeNeuron {
                    id: NeuronId::new(0, i),
                    share: 1.0,
                    mean_score: 1.0,
                })
                .collect(),
        };
        let s = overlap_stats(&[set(0, 0, &[1, 2, 3]), set(1, 0, &[3, 2, 1]), set(2, 1, &[7, 8])]);
        assert_eq!(s.intra, 3.0);
        assert_eq!(s.inter, 0.0);
        assert_eq!((s.intra_pairs, s.inter_pairs), (1, 2));
        assert!((s.avg_size - 8.0 / 3.0).abs() < 1e-12);
    }
}
