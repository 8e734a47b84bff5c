// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use kneuron::facts::{
    build_prompt_groups, build_queries, generate_world, read_world, write_query_tsv, write_world,
    Entity, EntityType, Fact, PromptTemplate, Relation, World, WorldSpec,
};
use kneuron::vocab::{CLS, MASK, SEP};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn capital_world() -> World {
    let entities = vec![
        Entity { id: 0, name: "Ireland".into(), kind: EntityType::Country },
        Entity { id: 1, name: "Dublin".into(), kind: EntityType::City },
        Entity { id: 2, name: "Cork".into(), kind: EntityType::City },
    ];
    let relations = vec![Relation {
        id: 0,
        name: "capital".into(),
        head_type: EntityType::Country,
        tail_type: EntityType::City,
    }];
    let templates = vec![
        PromptTemplate { id: 0, relation: 0, text: "The capital of [X] is [Y]".into() },
        PromptTemplate { id: 1, relation: 0, text: "[Y] is the capital of [X]".into() },
    ];
    let facts = vec![Fact { id: 0, head: 0, relation: 0, tail: 1 }];
    World::new(entities, relations, templates, facts).unwrap()
}

#[test]
fn cloze_query_from_template() {
    let w = capital_world();
    let qs = w.queries().unwrap();
    assert_eq!(qs.len(), 2);
    let text = w.vocab.decode(&qs[0].tokens);
    assert_eq!(text, "[CLS] The capital of Ireland is [MASK] [SEP]");
    assert_eq!(qs[0].answer, w.vocab.id("Dublin").unwrap());
    assert_eq!(qs[0].tokens[qs[0].mask_pos], MASK);

    // [Y] before [X]: the mask precedes the head.
    let head = w.vocab.id("Ireland").unwrap();
    let head_pos = qs[1].tokens.iter().position(|&t| t == head).unwrap();
    assert!(qs[1].mask_pos < head_pos);
}

#[test]
fn default_world_counts() {
    let w = generate_world(&WorldSpec::default()).unwrap();
    assert_eq!(w.relations.len(), 8);
    assert_eq!(w.templates.len(), 72);
    let qs = w.queries().unwrap();
    assert_eq!(qs.len(), 8 * 9 * 50);
    assert!(w.vocab.len() > 500 && w.vocab.len() < 700, "vocab {}", w.vocab.len());
    assert!(qs.iter().all(|q| q.tokens.len() <= 32));
    let distinct: HashSet<&Vec<u32>> = qs.iter().map(|q| &q.tokens).collect();
    assert_eq!(distinct.len(), qs.len());

    let first: Vec<Fact> = w.facts_of(0).copied().collect();
    assert_eq!(build_queries(&w, &first).unwrap().len(), 450);
}

#[test]
fn templates_identify_their_relation() {
    let w = generate_world(&WorldSpec { n_relations: 10, templates_per_relation: 10, ..WorldSpec::default() }).unwrap();
    let texts: HashSet<&str> = w.templates.iter().map(|t| t.text.as_str()).collect();
    assert_eq!(texts.len(), w.templates.len());
}

#[test]
fn world_file_round_trip() {
    let spec = WorldSpec { entities_per_type: 30, facts_per_relation: 10, ..WorldSpec::default() };
    let w = generate_world(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.jsonl");
    write_world(&path, &w).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().all(|l| l.starts_with("{\"kind\":")));
    let back = read_world(&path).unwrap();
    assert_eq!(back, w);

    let tsv = dir.path().join("queries.tsv");
    let qs = w.queries().unwrap();
    write_query_tsv(&tsv, &w, &qs).unwrap();
    let dump = std::fs::read_to_string(&tsv).unwrap();
    let row: Vec<&str> = dump.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row.len(), 5);
    let mask_index: usize = row[3].parse().unwrap();
    assert_eq!(row[2].split(' ').nth(mask_index), Some("[MASK]"));
}

#[test]
fn corrupt_world_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"kind\":\"planet\",\"id\":0}\n").unwrap();
    assert!(read_world(&path).is_err());
}

#[test]
fn prompt_groups_have_the_promised_contents() {
    let spec = WorldSpec { entities_per_type: 40, facts_per_relation: 20, ..WorldSpec::default() };
    let w = generate_world(&spec).unwrap();
    let ids: Vec<usize> = (0..w.facts.len()).step_by(7).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let groups = build_prompt_groups(&w, &ids, 8, &mut rng).unwrap();
    assert_eq!(groups.len(), ids.len());
    for g in &groups {
        let f = w.facts[g.fact];
        let head = w.entity_token(f.head).unwrap();
        let tail = w.entity_token(f.tail).unwrap();
        assert_eq!((g.t1.len(), g.t2.len(), g.t3.len()), (8, 8, 8));
        for q in &g.t1 {
            let mut filled = q.tokens.clone();
            filled[q.mask_pos] = q.answer;
            assert!(filled.contains(&head) && filled.contains(&tail));
        }
        for q in &g.t2 {
            let mut filled = q.tokens.clone();
            filled[q.mask_pos] = q.answer;
            assert!(filled.contains(&head) && !filled.contains(&tail));
            assert_ne!(q.answer, tail);
            assert_ne!(w.templates[q.template].relation, f.relation);
        }
        for (q, t1) in g.t3.iter().zip(&g.t1) {
            assert_eq!(q.tokens.len(), t1.tokens.len());
            assert_eq!((q.tokens[0], *q.tokens.last().unwrap()), (CLS, SEP));
            assert!(!q.tokens.contains(&head) && !q.tokens.contains(&tail));
            q.validate(w.vocab.len()).unwrap();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(24) })]
    #[test]
    fn generation_is_deterministic_and_functional(
        seed in any::<u64>(),
        n_relations in 2usize..=10,
        templates in 4usize..=10,
        entities in 5usize..40,
    ) {
        let spec = WorldSpec {
            n_relations,
            templates_per_relation: templates,
            entities_per_type: entities,
            facts_per_relation: entities / 2 + 1,
            seed,
        };
        let a = generate_world(&spec).unwrap();
        let b = generate_world(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        let mut seen = HashSet::new();
        for f in &a.facts {
            prop_assert!(seen.insert((f.head, f.relation)));
        }
        let qs = a.queries().unwrap();
        prop_assert_eq!(qs.len(), n_relations * templates * spec.facts_per_relation);
        for q in &qs {
            q.validate(a.vocab.len()).unwrap();
            prop_assert_eq!(q.answer, a.entity_token(a.facts[q.fact].tail).unwrap());
        }
    }
}
