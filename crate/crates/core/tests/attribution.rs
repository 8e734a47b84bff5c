// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use kneuron::attribution::{
    attribute_all, attribute_baseline, attribute_ig, coarse_set, read_map_binary,
    read_refined_sets, refine_relation, write_attribution_tsv, write_map_binary,
    write_refined_sets, FactAttributions, IgPath, Method, RefineConfig,
};
use kneuron::model::{forward_cloze, NeuronId, NeuronOverride, OverrideMode};
use kneuron::KnError;
use proptest::prelude::*;

#[test]
fn joint_path_is_complete_on_one_layer() {
    let world = common::small_world();
    let w = common::trained(&world, 1);
    let cfg = w.config;
    let all: Vec<NeuronId> = (0..cfg.d_ffn).map(|i| NeuronId::new(0, i)).collect();
    for q in world.queries().unwrap().iter().step_by(17).take(3) {
        let fine = attribute_ig(&w, q, 2000, IgPath::Joint).unwrap();
        let p_orig = forward_cloze(&w, q, &NeuronOverride::new()).unwrap().answer_prob;
        let off = NeuronOverride::uniform(all.iter().copied(), OverrideMode::Set(0.0));
        let p_zero = forward_cloze(&w, q, &off).unwrap().answer_prob;
        let diff = f64::from(p_orig) - f64::from(p_zero);
        let rel = (fine.total() - diff).abs() / diff.abs();
        println!("sum {:.6} diff {:.6} rel {:.2e}", fine.total(), diff, rel);
        assert!(diff.abs() > 1e-3);
        assert!(rel < 0.02);

        let coarse = attribute_ig(&w, q, 20, IgPath::Joint).unwrap();
        let max = fine.scores.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        let gap = fine
            .scores
            .iter()
            .zip(&coarse.scores)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        println!("m=20 gap {:.3} of max", gap / max);
        assert!(gap / max < 0.1);
    }
}

#[test]
fn inactive_neurons_score_zero() {
    let world = common::small_world();
    let mut w = common::trained(&world, 2);
    w.layers[1].ffn_key_bias.data_mut()[5] = -1000.0;
    let q = &world.queries().unwrap()[3];
    let map = attribute_ig(&w, q, 10, IgPath::Joint).unwrap();
    let n = NeuronId::new(1, 5);
    assert_eq!(map.activation(n), 0.0);
    assert_eq!(map.score(n), 0.0);
    for (id, s) in map.iter() {
        if map.activation(id) == 0.0 {
            assert_eq!(s, 0.0);
        }
    }
    assert_eq!(map.len(), 2 * w.config.d_ffn);
}

#[test]
fn independent_path_is_complete_per_neuron() {
    let world = common::small_world();
    let w = common::trained(&world, 2);
    let q = &world.queries().unwrap()[5];
    let map = attribute_ig(&w, q, 100, IgPath::Independent).unwrap();
    let p_orig = f64::from(forward_cloze(&w, q, &NeuronOverride::new()).unwrap().answer_prob);
    // Pinning every neuron at w̄ and zeroing one is the 1-D path end point.
    for (id, _) in map.top_k(3) {
        let mut ov = NeuronOverride::new();
        for (other, _) in map.iter() {
            ov.insert(other, OverrideMode::Set(map.activation(other)));
        }
        ov.insert(id, OverrideMode::Set(0.0));
        let p_zero = f64::from(forward_cloze(&w, q, &ov).unwrap().answer_prob);
        let diff = p_orig - p_zero;
        let s = f64::from(map.score(id));
        assert!((s - diff).abs() <= 0.02 * diff.abs() + 1e-6, "{id}: {s} vs {diff}");
    }
}

#[test]
fn single_step_and_zero_steps() {
    let world = common::small_world();
    let w = common::trained(&world, 1);
    let q = &world.queries().unwrap()[0];
    let map = attribute_ig(&w, q, 1, IgPath::Joint).unwrap();
    assert!(map.scores.iter().all(|s| s.is_finite()));
    assert!(matches!(attribute_ig(&w, q, 0, IgPath::Joint), Err(KnError::Config(_))));
}

#[test]
fn baseline_is_the_recorded_activation() {
    let world = common::small_world();
    let w = common::trained(&world, 2);
    let q = &world.queries().unwrap()[7];
    let base = attribute_baseline(&w, q).unwrap();
    let out = forward_cloze(&w, q, &NeuronOverride::new()).unwrap();
    let recorded: Vec<f32> = out.activations.concat();
    assert_eq!(base.scores, recorded);
    assert_eq!(base.activations, recorded);
}

#[test]
fn baseline_on_zero_token_embeddings_sees_positions_only() {
    let world = common::small_world();
    let mut w = common::trained(&world, 1);
    w.token_emb.data_mut().fill(0.0);
    let q = &world.queries().unwrap()[2];
    let base = attribute_baseline(&w, q).unwrap();
    // With zero token embeddings the FFN input at the mask depends only on
    // position embeddings, so any query with the same mask position and
    // length gives the same activations.
    let other = world
        .queries()
        .unwrap()
        .into_iter()
        .find(|o| o.mask_pos == q.mask_pos && o.tokens.len() == q.tokens.len() && o.fact != q.fact)
        .unwrap();
    assert_eq!(base.scores, attribute_baseline(&w, &other).unwrap().scores);
}

#[test]
fn batch_attribution_matches_single_and_is_deterministic() {
    let world = common::small_world();
    let w = common::trained(&world, 2);
    let qs: Vec<_> = world.queries().unwrap().into_iter().take(4).collect();
    let method = Method::Ig { steps: 8, path: IgPath::Joint };
    let a = attribute_all(&w, &qs, method).unwrap();
    let b = attribute_all(&w, &qs, method).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[2], attribute_ig(&w, &qs[2], 8, IgPath::Joint).unwrap());
}

#[test]
fn refinement_end_to_end_and_dumps() {
    let world = common::small_world();
    let w = common::trained(&world, 2);
    let per_fact = world.queries_by_fact(&[0, 1, 2, 3]).unwrap();
    let facts: Vec<FactAttributions> = per_fact
        .iter()
        .map(|qs| FactAttributions {
            fact: qs[0].fact,
            relation: world.facts[qs[0].fact].relation,
            maps: attribute_all(&w, qs, Method::Ig { steps: 10, path: IgPath::Joint }).unwrap(),
        })
        .collect();
    let r = refine_relation(&facts, &RefineConfig::default()).unwrap();
    println!("p {} avg {} stop {:?}", r.p, r.avg_size, r.stop);
    assert_eq!(r.sets.len(), 4);
    for s in &r.sets {
        assert!(s.neurons.iter().all(|n| n.share > r.p));
    }

    let dir = tempfile::tempdir().unwrap();
    let maps: Vec<_> = facts.iter().flat_map(|f| f.maps.clone()).collect();
    let bin = dir.path().join("maps.bin");
    write_map_binary(&bin, &maps).unwrap();
    assert_eq!(read_map_binary(&bin).unwrap(), maps);
    let tsv = dir.path().join("top.tsv");
    write_attribution_tsv(&tsv, &maps, 200).unwrap();
    let lines = std::fs::read_to_string(&tsv).unwrap().lines().count();
    assert_eq!(lines, 1 + maps.len() * 128);
    let sets = dir.path().join("sets.jsonl");
    write_refined_sets(&sets, &r.sets).unwrap();
    assert_eq!(read_refined_sets(&sets).unwrap(), r.sets);
}

fn synthetic_map(scores: Vec<f32>) -> kneuron::attribution::AttributionMap {
    kneuron::attribution::AttributionMap {
        fact: 0,
        template: 0,
        n_layers: 1,
        d_ffn: scores.len(),
        activations: scores.clone(),
        scores,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn coarse_set_is_scale_invariant(
        scores in prop::collection::vec(-1.0f32..1.0, 1..64),
        exp in -20i32..20,
        t in 0.05f32..0.95,
    ) {
        let c = 2f32.powi(exp);
        let a = coarse_set(&synthetic_map(scores.clone()), t).unwrap();
        let b = coarse_set(&synthetic_map(scores.iter().map(|s| s * c).collect()), t).unwrap();
        prop_assert_eq!(a.neurons, b.neurons);
    }

    #[test]
    fn coarse_members_exceed_threshold(scores in prop::collection::vec(-1.0f32..1.0, 1..64)) {
        let map = synthetic_map(scores.clone());
        let c = coarse_set(&map, 0.2).unwrap();
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max > 0.0 {
            prop_assert!(!c.neurons.is_empty());
        }
        for n in &c.neurons {
            prop_assert!(f64::from(map.score(*n)) > c.threshold);
        }
    }

    #[test]
    fn raising_p_never_grows_a_set(
        membership in prop::collection::vec(prop::collection::vec(any::<bool>(), 12), 2..9),
        lo in 0.0f64..4.0,
    ) {
        // Each prompt's map scores neuron i at 1 if it is a member, else 0,
        // plus a fixed always-on neuron so every map has a positive maximum.
        let maps: Vec<_> = membership
            .iter()
            .map(|m| {
                let mut s: Vec<f32> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                s.push(1.0);
                synthetic_map(s)
            })
            .collect();
        let fa = FactAttributions { fact: 0, relation: 0, maps };
        let run = |p: f64| {
            let cfg = RefineConfig { p_init: p, band_lo: lo, band_hi: 100.0, ..RefineConfig::default() };
            // A wide band makes the search stop at p_init when the set is big enough.
            refine_relation(std::slice::from_ref(&fa), &cfg).unwrap()
        };
        let low = run(0.3);
        let high = run(0.6);
        if low.p == 0.3 && high.p == 0.6 {
            let l = low.sets[0].ids();
            for id in high.sets[0].ids() {
                prop_assert!(l.contains(&id));
            }
        }
    }
}

#[test]
fn finer_steps_converge_monotonically() {
    let world = common::small_world();
    let w = common::trained(&world, 1);
    let q = &world.queries().unwrap()[5];
    let reference = attribute_ig(&w, q, 2000, IgPath::Joint).unwrap();
    let gaps: Vec<f32> = [20, 100, 500]
        .iter()
        .map(|&m| {
            let map = attribute_ig(&w, q, m, IgPath::Joint).unwrap();
            reference
                .scores
                .iter()
                .zip(&map.scores)
                .fold(0.0f32, |g, (a, b)| g.max((a - b).abs()))
        })
        .collect();
    assert!(gaps.windows(2).all(|p| p[1] <= p[0]), "{gaps:?}");
}
