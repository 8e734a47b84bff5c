// SPDX-License-Identifier: MIT OR Apache-2.0

//! Masked-answer training and evaluation.
//!
//! Only the tail position of each cloze query is masked and predicted.
//! Training runs Adam with linear warmup over shuffled mini-batches until the
//! top-1 accuracy on the training queries reaches a target or the step budget
//! runs out.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KnError, Result};
use crate::model::{forward_cloze_batch, lm_loss_and_grads, TransformerWeights};
use crate::tensor::Tensor;
use crate::vocab::ClozeQuery;

/// Queries per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Zero evaluates the initial model and returns.
    pub max_steps: usize,
    pub target_accuracy: f64,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            warmup_steps: 500,
            max_steps: 20_000,
            target_accuracy: 0.95,
            eval_interval: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KnError::Config(m.into()));
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return bad("target accuracy must be in (0, 1]");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch size and eval interval must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning rate must be positive and betas in [0, 1)");
        }
        Ok(())
    }
}

/// Metrics of one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub fact: usize,
    pub template: usize,
    pub answer_prob: f32,
    pub answer_logprob: f64,
    pub correct: bool,
}

/// Accuracy and perplexity of a group of queries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub n: usize,
    pub accuracy: f64,
    /// `exp` of the mean negative log-probability of the answers.
    pub perplexity: f64,
}

impl GroupEval {
    /// Aggregates in a fixed (sorted) order so the result does not depend on
    /// the order of the queries.
    fn from_queries<'a>(qs: impl Iterator<Item = &'a QueryEval>) -> Self {
        let mut nll: Vec<f64> = Vec::new();
        let mut correct = 0usize;
        for q in qs {
            nll.push(-q.answer_logprob);
            correct += usize::from(q.correct);
        }
        let n = nll.len();
        if n == 0 {
            return Self {
                n,
                accuracy: 0.0,
                perplexity: f64::NAN,
            };
        }
        nll.sort_by(f64::total_cmp);
        Self {
            n,
            accuracy: correct as f64 / n as f64,
            perplexity: (nll.iter().sum::<f64>() / n as f64).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// In input order.
    pub queries: Vec<QueryEval>,
    pub per_relation: BTreeMap<usize, GroupEval>,
    pub overall: GroupEval,
}

impl EvalReport {
    /// Facts answered correctly on every one of their queries.
    pub fn known_facts(&self) -> Vec<usize> {
        let mut all: BTreeMap<usize, bool> = BTreeMap::new();
        for q in &self.queries {
            *all.entry(q.fact).or_insert(true) &= q.correct;
        }
        all.into_iter().filter(|&(_, ok)| ok).map(|(f, _)| f).collect()
    }

    /// Metrics over the queries whose relation satisfies `keep`.
    pub fn group(&self, fact_relations: &[usize], keep: impl Fn(usize) -> bool) -> GroupEval {
        GroupEval::from_queries(self.queries.iter().filter(|q| keep(fact_relations[q.fact])))
    }
}

/// Accuracy, answer probabilities and perplexity. `fact_relations[f]` is the
/// relation of fact `f`.
pub fn evaluate(
    weights: &TransformerWeights,
    queries: &[ClozeQuery],
    fact_relations: &[usize],
) -> Result<EvalReport> {
    if let Some(q) = queries.iter().find(|q| q.fact >= fact_relations.len()) {
        return Err(KnError::Index(format!("query references unknown fact {}", q.fact)));
    }
    let chunks: Vec<Vec<QueryEval>> = queries
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let outs = forward_cloze_batch(weights, chunk, &[])?;
            Ok(chunk
                .iter()
                .zip(outs)
                .map(|(q, o)| QueryEval {
                    fact: q.fact,
                    template: q.template,
                    answer_prob: o.answer_prob,
                    answer_logprob: o.answer_logprob,
                    correct: o.top_token() == q.answer,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let queries: Vec<QueryEval> = chunks.into_iter().flatten().collect();
    let mut per_relation = BTreeMap::new();
    let relations: std::collections::BTreeSet<usize> =
        queries.iter().map(|q| fact_relations[q.fact]).collect();
    for r in relations {
        per_relation.insert(
            r,
            GroupEval::from_queries(queries.iter().filter(|q| fact_relations[q.fact] == r)),
        );
    }
    let overall = GroupEval::from_queries(queries.iter());
    Ok(EvalReport {
        queries,
        per_relation,
        overall,
    })
}

/// One progress line: step, mean training loss since the previous line, and
/// accuracy on all training queries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_step: usize,
    /// Mean cross-entropy over all training queries at the end.
    pub final_loss: f64,
    pub accuracy: f64,
    pub per_relation_accuracy: BTreeMap<usize, f64>,
    pub known_facts: Vec<usize>,
    pub reached_target: bool,
}

impl TrainReport {
    fn from_eval(step: usize, eval: &EvalReport, target: f64) -> Self {
        Self {
            final_step: step,
            final_loss: eval.overall.perplexity.ln(),
            accuracy: eval.overall.accuracy,
            per_relation_accuracy: eval
                .per_relation
                .iter()
                .map(|(&r, g)| (r, g.accuracy))
                .collect(),
            known_facts: eval.known_facts(),
            reached_target: eval.overall.accuracy >= target,
        }
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(weights: &TransformerWeights) -> Self {
        let zeros: Vec<Vec<f32>> = weights
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut TransformerWeights, grads: &[Tensor], lr: f32, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in weights
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Trains `weights` in place on `queries`.
///
/// Evaluates every `eval_interval` steps and stops once accuracy reaches the
/// target. A non-finite loss or gradient aborts with a divergence error.
pub fn train(
    weights: &mut TransformerWeights,
    queries: &[ClozeQuery],
    fact_relations: &[usize],
    cfg: &TrainConfig,
    mut on_progress: impl FnMut(&TrainProgress),
) -> Result<TrainReport> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(KnError::Contract("no training queries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = Adam::new(weights);
    let mut window = (0.0f64, 0usize);

    let eval = evaluate(weights, queries, fact_relations)?;
    on_progress(&TrainProgress {
        step: 0,
        loss: eval.overall.perplexity.ln(),
        accuracy: eval.overall.accuracy,
    });
    let mut report = TrainReport::from_eval(0, &eval, cfg.target_accuracy);
    if report.reached_target {
        return Ok(report);
    }

    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.max_steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(queries.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(queries[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = lm_loss_and_grads(weights, &batch)?;
        if !loss.is_finite() {
            return Err(KnError::Divergence {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        if let Some(bad) = grads.iter().position(|g| g.data().iter().any(|v| !v.is_finite())) {
            let name = weights.named_tensors()[bad].0.clone();
            return Err(KnError::Divergence {
                step,
                detail: format!("non-finite gradient in {name}"),
            });
        }
        let warm = if cfg.warmup_steps == 0 {
            1.0
        } else {
            (step as f32 / cfg.warmup_steps as f32).min(1.0)
        };
        adam.step(weights, &grads, cfg.lr * warm, cfg);
        window.0 += f64::from(loss);
        window.1 += 1;

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let eval = evaluate(weights, queries, fact_relations)?;
            on_progress(&TrainProgress {
                step,
                loss: window.0 / window.1 as f64,
                accuracy: eval.overall.accuracy,
            });
            log::debug!("step {step}: accuracy {:.4}", eval.overall.accuracy);
            window = (0.0, 0);
            report = TrainReport::from_eval(step, &eval, cfg.target_accuracy);
            if report.reached_target {
                break;
            }
        }
    }
    Ok(report)
}
