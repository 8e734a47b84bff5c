// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference oracle for tape gradients.
//!
//! The finite-difference side never touches the tape: it differentiates an
//! independent `f64` reference implementation of the same function (see
//! [`reference`]). Rounding noise of `f32` forwards would otherwise swamp
//! a `1e-3` relative tolerance at step `h = 1e-3`. The reference and tape
//! forwards are compared too, so a reference that computes a different
//! function is caught.

pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::model::{lm_loss_and_grads, TransformerWeights};
use crate::tensor::{OverrideMode, Tape, Tensor, Var};
use crate::vocab::ClozeQuery;

/// Outcome of a gradient check for one input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude of this input.
    pub grad_scale: f64,
    pub checked: usize,
}

/// Report for a whole check: per-input results plus forward agreement.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub inputs: Vec<GradCheck>,
    /// Max |tape output − reference output| relative to the output scale.
    pub forward_rel_err: f64,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|fd − ad| / max(|fd|, |ad|, floor)`.
pub fn relative_error(fd: f64, ad: f64, floor: f64) -> f64 {
    (fd - ad).abs() / fd.abs().max(ad.abs()).max(floor)
}

/// Settings shared by every check.
#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub h: f64,
    /// Coordinates sampled per input (all of them when the input is smaller).
    pub max_coords: usize,
    /// Error floor as a fraction of the largest gradient magnitude over all
    /// inputs. Inputs whose true gradient is zero (a key bias under softmax,
    /// say) are then compared against that floor instead of against noise.
    pub floor_frac: f64,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            max_coords: 64,
            floor_frac: 1e-6,
            seed: 0,
        }
    }
}

/// Checks `d(w · f(inputs)) / d inputs` where `f` is built on a tape by
/// `build` and independently evaluated in `f64` by `reference`.
pub fn check<F, R>(build: F, reference: R, inputs: &[Tensor], cfg: CheckConfig) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Fn(&[Vec<f64>]) -> Vec<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    let out_shape = tape.value(out).shape().to_vec();
    let tape_out: Vec<f64> = tape.value(out).data().iter().map(|&v| f64::from(v)).collect();

    let unif = Uniform::new(0.5f32, 1.5).expect("valid range");
    let weights: Vec<f32> = (0..tape_out.len())
        .map(|i| {
            let w = unif.sample(&mut rng);
            if i % 2 == 0 {
                w
            } else {
                -w
            }
        })
        .collect();
    let w_var = tape.leaf(Tensor::new(out_shape, weights.clone())?, false);
    let proj = tape.mul(out, w_var)?;
    let loss = tape.sum(proj);
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let ref_out = reference(&base);
    let out_scale = ref_out.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let forward_rel_err = if ref_out.len() == tape_out.len() {
        tape_out
            .iter()
            .zip(&ref_out)
            .map(|(a, b)| (a - b).abs() / out_scale)
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };

    let project = |x: &[Vec<f64>]| -> f64 {
        reference(x)
            .iter()
            .zip(&weights)
            .map(|(y, &w)| y * f64::from(w))
            .sum()
    };
    let results = compare(&analytic, project, &base, cfg, &mut rng);
    Ok(CheckReport {
        inputs: results,
        forward_rel_err,
    })
}

/// Compares analytic gradients of a scalar function against central
/// differences of its `f64` reference.
fn compare<R>(
    analytic: &[Vec<f32>],
    reference: R,
    base: &[Vec<f64>],
    cfg: CheckConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<GradCheck>
where
    R: Fn(&[Vec<f64>]) -> f64,
{
    let mut results = Vec::with_capacity(base.len());
    let mut work = base.to_vec();
    let global_scale = analytic
        .iter()
        .flatten()
        .fold(0.0f64, |m, &g| m.max(f64::from(g).abs()));
    let floor = (global_scale * cfg.floor_frac).max(1e-12);
    for (which, input) in base.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let pick = Uniform::new(0, n).expect("non-empty");
            (0..cfg.max_coords).map(|_| pick.sample(rng)).collect()
        };
        let grad_scale = analytic[which]
            .iter()
            .fold(0.0f64, |m, &g| m.max(f64::from(g).abs()));
        let mut max_rel_err = 0.0f64;
        for &c in &coords {
            let orig = work[which][c];
            work[which][c] = orig + cfg.h;
            let plus = reference(&work);
            work[which][c] = orig - cfg.h;
            let minus = reference(&work);
            work[which][c] = orig;
            let fd = (plus - minus) / (2.0 * cfg.h);
            let ad = f64::from(analytic[which][c]);
            max_rel_err = max_rel_err.max(relative_error(fd, ad, floor));
        }
        results.push(GradCheck {
            max_rel_err,
            grad_scale,
            checked: coords.len(),
        });
    }
    results
}

/// End-to-end check of every parameter gradient of the masked-LM loss
/// against finite differences of [`reference::mlm_loss`].
pub fn model_gradient_check(
    weights: &TransformerWeights,
    batch: &[ClozeQuery],
    cfg: CheckConfig,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (loss, grads) = lm_loss_and_grads(weights, batch)?;
    let analytic: Vec<Vec<f32>> = grads.into_iter().map(Tensor::into_data).collect();
    let base: Vec<Vec<f64>> = weights
        .named_tensors()
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let c = weights.config;
    let items: Vec<(Vec<u32>, usize, u32)> = batch
        .iter()
        .map(|q| (q.tokens.clone(), q.mask_pos, q.answer))
        .collect();
    let reference_loss = |p: &[Vec<f64>]| {
        reference::mlm_loss(
            p,
            c.n_layers,
            c.d_model,
            c.d_ffn,
            c.n_heads,
            c.vocab_size,
            f64::from(crate::model::LN_EPS),
            &items,
        )
    };
    let ref_val = reference_loss(&base);
    let forward_rel_err = (f64::from(loss) - ref_val).abs() / ref_val.abs().max(1e-12);
    let inputs = compare(&analytic, reference_loss, &base, cfg, &mut rng);
    Ok(CheckReport {
        inputs,
        forward_rel_err,
    })
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn seeded(seed: u64) -> CheckConfig {
    CheckConfig {
        seed,
        ..CheckConfig::default()
    }
}

/// Runs [`check`] on every tape primitive with small random inputs.
pub fn primitive_suite() -> Result<Vec<(&'static str, CheckReport)>> {
    use reference as r;
    let mut out = Vec::new();
    out.push((
        "matmul",
        check(
            |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]),
            |x| r::matmul(&x[0], &x[1], 5, 7, 3),
            &[randn(&[5, 7], 1), randn(&[7, 3], 2)],
            seeded(11),
        )?,
    ));
    out.push((
        "matmul_nt",
        check(
            |t: &mut Tape, v: &[Var]| t.matmul_nt(v[0], v[1]),
            |x| r::matmul_nt(&x[0], &x[1], 4, 6, 5),
            &[randn(&[4, 6], 3), randn(&[5, 6], 4)],
            seeded(12),
        )?,
    ));
    out.push((
        "gelu",
        check(
            |t: &mut Tape, v: &[Var]| Ok(t.gelu(v[0])),
            |x| r::gelu(&x[0]),
            &[randn(&[3, 5], 5)],
            seeded(13),
        )?,
    ));
    for (name, axis, outer, len, inner) in [("softmax_axis0", 0usize, 1usize, 3usize, 4usize), ("softmax_axis1", 1, 3, 4, 1)] {
        out.push((
            name,
            check(
                |t: &mut Tape, v: &[Var]| t.softmax(v[0], axis),
                |x| r::softmax(&x[0], outer, len, inner),
                &[randn(&[3, 4], 6)],
                seeded(14),
            )?,
        ));
    }
    out.push((
        "layer_norm",
        check(
            |t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2], 1e-5),
            |x| r::layer_norm(&x[0], &x[1], &x[2], 1e-5),
            &[randn(&[2, 8], 7), randn(&[8], 8), randn(&[8], 9)],
            seeded(15),
        )?,
    ));
    out.push((
        "cross_entropy",
        check(
            |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[4]),
            |x| vec![r::cross_entropy(&x[0], 10, &[4])],
            &[randn(&[10], 10)],
            seeded(16),
        )?,
    ));
    out.push((
        "cross_entropy_batch",
        check(
            |t: &mut Tape, v: &[Var]| t.cross_entropy(v[0], &[1, 0, 9]),
            |x| vec![r::cross_entropy(&x[0], 10, &[1, 0, 9])],
            &[randn(&[3, 10], 17)],
            seeded(18),
        )?,
    ));
    let segments = [(0usize, 3usize), (3, 4)];
    out.push((
        "attention",
        check(
            |t: &mut Tape, v: &[Var]| t.attention(v[0], v[1], v[2], &segments, 2),
            |x| r::attention(&x[0], &x[1], &x[2], 4, &segments, 2),
            &[randn(&[7, 4], 19), randn(&[7, 4], 20), randn(&[7, 4], 21)],
            seeded(22),
        )?,
    ));
    // gather_rows, add_row, mul, scale, add, override_elements, pick_per_row.
    out.push((
        "structural",
        check(
            |t: &mut Tape, v: &[Var]| {
                let rows = t.gather_rows(v[0], &[2, 0, 2, 1])?;
                let biased = t.add_row(rows, v[1])?;
                let sq = t.mul(biased, biased)?;
                let s = t.scale(sq, 0.5);
                let summed = t.add(s, biased)?;
                let edited = t.override_elements(
                    summed,
                    &[(1, OverrideMode::Scale(2.0)), (5, OverrideMode::Set(0.3))],
                    false,
                )?;
                t.pick_per_row(edited, &[0, 2, 1, 1])
            },
            |x| {
                let mut rows = Vec::new();
                for &i in &[2usize, 0, 2, 1] {
                    rows.extend_from_slice(&x[0][i * 3..i * 3 + 3]);
                }
                let biased = r::add_row(&rows, &x[1]);
                let mut summed: Vec<f64> = biased.iter().map(|b| 0.5 * b * b + b).collect();
                summed[1] *= 2.0;
                summed[5] = 0.3;
                [0usize, 2, 1, 1]
                    .iter()
                    .enumerate()
                    .map(|(row, &c)| summed[row * 3 + c])
                    .collect()
            },
            &[randn(&[3, 3], 23), randn(&[3], 24)],
            seeded(25),
        )?,
    ));
    Ok(out)
}
