// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;

use kneuron::attribution::{KnowledgeNeuron, KnowledgeNeuronSet};
use kneuron::facts::build_prompt_groups;
use kneuron::intervention::{
    activation_study, intervention_study, mean_activation, rank_prompts_by_activation,
    suppress_or_amplify, FactSubject, Mode, NeuronSource,
};
use kneuron::model::{forward_cloze_batch, NeuronId};
use kneuron::KnError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn set(fact: usize, relation: usize, ids: &[NeuronId]) -> KnowledgeNeuronSet {
    KnowledgeNeuronSet {
        fact,
        relation,
        p: 0.7,
        t_fraction: 0.2,
        neurons: ids
            .iter()
            .map(|&id| KnowledgeNeuron {
                id,
                share: 1.0,
                mean_score: 0.1,
            })
            .collect(),
    }
}

#[test]
fn interventions_leave_weights_untouched() {
    let world = common::small_world();
    let w = common::trained(&world, 2);
    let digest = w.digest();
    let by_fact = world.queries_by_fact(&[0, 1, 2, 3]).unwrap();
    let sets: Vec<KnowledgeNeuronSet> = (0..4)
        .map(|f| set(f, world.facts[f].relation, &[NeuronId::new(1, f), NeuronId::new(0, 7)]))
        .collect();
    let subjects: Vec<FactSubject<'_>> = (0..4)
        .map(|f| FactSubject {
            fact: f,
            relation: world.facts[f].relation,
            prompts: &by_fact[f],
            ig: &sets[f],
            baseline: Some(&sets[(f + 1) % 4]),
        })
        .collect();
    let report = intervention_study(&w, &subjects, 3).unwrap();
    assert_eq!(w.digest(), digest);
    // Two modes for each of three sources.
    assert_eq!(report.facts.len(), 4 * 6);
    assert!(report.facts.iter().all(|f| f.before > 0.0));
    let again = intervention_study(&w, &subjects, 3).unwrap();
    assert_eq!(report, again);
    assert!(report.mean_change(NeuronSource::Ig, Mode::Suppress).is_finite());
}

#[test]
fn suppressing_every_neuron_of_a_layer_moves_the_answer() {
    let world = common::small_world();
    let w = common::trained(&world, 1);
    let prompts = &world.queries_by_fact(&[0]).unwrap()[0];
    let all: Vec<NeuronId> = (0..w.config.d_ffn).map(|i| NeuronId::new(0, i)).collect();
    let sup = suppress_or_amplify(&w, prompts, &all, Mode::Suppress).unwrap();
    assert!(sup.iter().any(|e| e.after != e.before));
    let amp = suppress_or_amplify(&w, prompts, &all, Mode::Amplify).unwrap();
    for (s, a) in sup.iter().zip(&amp) {
        assert_eq!(s.before, a.before);
    }
    assert!(matches!(
        suppress_or_amplify(&w, prompts, &[], Mode::Suppress),
        Err(KnError::Contract(_))
    ));
}

#[test]
fn activation_means_and_rankings_agree() {
    let world = common::small_world();
    let w = common::trained(&world, 2);
    let prompts = &world.queries_by_fact(&[4]).unwrap()[4 - 4];
    let ids = [NeuronId::new(1, 3), NeuronId::new(0, 11)];
    let outs = forward_cloze_batch(&w, prompts, &[]).unwrap();
    let by_hand: f64 = outs
        .iter()
        .map(|o| ids.iter().map(|n| f64::from(o.activations[n.layer][n.index])).sum::<f64>() / 2.0)
        .sum::<f64>()
        / prompts.len() as f64;
    let m = mean_activation(&w, prompts, &ids).unwrap();
    assert!((m - by_hand).abs() < 1e-9);

    let ranked = rank_prompts_by_activation(&w, &ids, prompts).unwrap();
    assert_eq!(ranked.len(), prompts.len());
    assert!(ranked.windows(2).all(|p| p[0].1 >= p[1].1));
    let mut reversed = prompts.clone();
    reversed.reverse();
    let back = rank_prompts_by_activation(&w, &ids, &reversed).unwrap();
    let scores = |r: &[(usize, f64)]| {
        let mut v: Vec<f64> = r.iter().map(|x| x.1).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    assert_eq!(scores(&ranked), scores(&back));
    let one = rank_prompts_by_activation(&w, &ids, &prompts[..1]).unwrap();
    assert_eq!(one[0].0, 0);
}

#[test]
fn activation_study_reports_each_source() {
    let world = common::small_world();
    let w = common::trained(&world, 2);
    let digest = w.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let groups = build_prompt_groups(&world, &[0, 1, 2], 3, &mut rng).unwrap();
    let ig: BTreeMap<usize, KnowledgeNeuronSet> = (0..3)
        .map(|f| (f, set(f, world.facts[f].relation, &[NeuronId::new(1, f)])))
        .collect();
    let report = activation_study(&w, &groups, &ig, Some(&ig)).unwrap();
    assert_eq!(w.digest(), digest);
    assert_eq!(report.n_facts, 3);
    assert_eq!(report.per_fact.len(), 6);
    assert_eq!(report.baseline, Some(report.ig));
}
