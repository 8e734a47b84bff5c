// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small trained fixtures shared by the integration tests.

#![allow(dead_code)]

use kneuron::facts::{generate_world, World, WorldSpec};
use kneuron::model::{ModelConfig, TransformerWeights};
use kneuron::trainer::{train, TrainConfig};

pub fn small_world() -> World {
    generate_world(&WorldSpec {
        n_relations: 3,
        templates_per_relation: 5,
        entities_per_type: 12,
        facts_per_relation: 6,
        seed: 11,
    })
    .unwrap()
}

pub fn small_config(n_layers: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 32,
        d_ffn: 64,
        n_heads: 2,
        vocab_size: vocab,
        max_seq_len: 16,
        seed: 21,
    }
}

/// A model trained until it answers every query of `world`.
pub fn trained(world: &World, n_layers: usize) -> TransformerWeights {
    let mut w = TransformerWeights::init(small_config(n_layers, world.vocab.len())).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        warmup_steps: 50,
        max_steps: 3000,
        target_accuracy: 1.0,
        eval_interval: 100,
        seed: 2,
        ..TrainConfig::default()
    };
    let report = train(&mut w, &world.queries().unwrap(), &world.fact_relations(), &cfg, |_| {}).unwrap();
    assert!(report.accuracy > 0.9, "fixture accuracy {}", report.accuracy);
    w
}
