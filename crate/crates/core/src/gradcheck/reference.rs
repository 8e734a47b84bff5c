// SPDX-License-Identifier: MIT OR Apache-2.0

//! Straightforward `f64` implementations of the tape primitives and of the
//! masked-LM forward pass, used only as finite-difference oracles.

use statrs::function::erf::erf;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
        }
    }
    out
}

pub fn add_row(a: &[f64], row: &[f64]) -> Vec<f64> {
    a.chunks(row.len())
        .flat_map(|r| r.iter().zip(row).map(|(x, y)| x + y))
        .collect()
}

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| v * 0.5 * (1.0 + erf(v / std::f64::consts::SQRT_2)))
        .collect()
}

pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|j| (x[idx(j)] - max).exp()).sum();
            for j in 0..len {
                out[idx(j)] = (x[idx(j)] - max).exp() / sum;
            }
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(
            row.iter()
                .zip(gain)
                .zip(bias)
                .map(|((v, g), b)| (v - mean) * inv * g + b),
        );
    }
    out
}

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[usize]) -> f64 {
    let total: f64 = logits
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    total / targets.len() as f64
}

/// Multi-head scaled dot-product attention over ragged segments.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    segments: &[(usize, usize)],
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    for &(s, len) in segments {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let scores: Vec<f64> = (0..len)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q[(s + i) * d + off + c] * k[(s + j) * d + off + c])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let p = softmax(&scores, 1, len, 1);
                for c in 0..dh {
                    out[(s + i) * d + off + c] =
                        (0..len).map(|j| p[j] * v[(s + j) * d + off + c]).sum();
                }
            }
        }
    }
    out
}

/// Mean masked-LM cross-entropy of a post-LN encoder with tied output
/// embeddings. `params` holds every parameter tensor flattened, in the
/// model's checkpoint order; `batch` lists `(tokens, mask_pos, answer)`.
#[allow(clippy::too_many_arguments)]
pub fn mlm_loss(
    params: &[Vec<f64>],
    n_layers: usize,
    d: usize,
    f: usize,
    heads: usize,
    vocab: usize,
    eps: f64,
    batch: &[(Vec<u32>, usize, u32)],
) -> f64 {
    let (tok, pos, eg, eb) = (&params[0], &params[1], &params[2], &params[3]);
    let mut logits_all = Vec::new();
    let mut targets = Vec::new();
    for (tokens, mask_pos, answer) in batch {
        let n = tokens.len();
        let mut x = Vec::with_capacity(n * d);
        for (p, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            x.extend((0..d).map(|c| tok[t * d + c] + pos[p * d + c]));
        }
        x = layer_norm(&x, eg, eb, eps);
        for l in 0..n_layers {
            let lp = |j: usize| &params[4 + l * 16 + j];
            let lin = |input: &[f64], w: usize, b: usize, rows: usize, din: usize, dout: usize| {
                add_row(&matmul(input, lp(w), rows, din, dout), lp(b))
            };
            let q = lin(&x, 0, 1, n, d, d);
            let k = lin(&x, 2, 3, n, d, d);
            let v = lin(&x, 4, 5, n, d, d);
            let ctx = attention(&q, &k, &v, d, &[(0, n)], heads);
            let a = lin(&ctx, 6, 7, n, d, d);
            let res: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            let h = layer_norm(&res, lp(8), lp(9), eps);
            let act = gelu(&lin(&h, 10, 11, n, d, f));
            let out = lin(&act, 12, 13, n, f, d);
            let res: Vec<f64> = h.iter().zip(&out).map(|(p, q)| p + q).collect();
            x = layer_norm(&res, lp(14), lp(15), eps);
        }
        let hm = &x[mask_pos * d..(mask_pos + 1) * d];
        let scores = matmul_nt(hm, tok, 1, d, vocab);
        logits_all.extend(add_row(&scores, &params[params.len() - 1]));
        targets.push(*answer as usize);
    }
    cross_entropy(&logits_all, vocab, &targets)
}
