// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar and row kernels shared by the tape primitives.

use statrs::function::erf::erf;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x · Φ(x)`, evaluated in `f64` and rounded once.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (x * 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))) as f32
}

/// `d/dx [x · Φ(x)] = Φ(x) + x · φ(x)`.
#[inline]
pub fn gelu_derivative(x: f32) -> f32 {
    let x = f64::from(x);
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    (cdf + x * pdf) as f32
}

/// Max-subtracted softmax over a contiguous row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        *v = e;
        sum += f64::from(e);
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over `axis` of a strided block: `outer × len × inner` layout.
pub(crate) fn softmax_axis(data: &mut [f32], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for row in data.chunks_mut(len) {
            softmax_in_place(row);
        }
        return;
    }
    let mut buf = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                data[base + j * inner] = *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Φ(x) by composite Simpson quadrature of the normal density.
    fn phi_quadrature(x: f64) -> f64 {
        let lower = -12.0;
        let n = 200_000;
        let h = (x - lower) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(lower) + pdf(x);
        for i in 1..n {
            let t = lower + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
        }
        acc * h / 3.0
    }

    #[test]
    fn gelu_matches_quadrature_oracle() {
        for &x in &[1.0f32, -0.7, 2.5] {
            let oracle = f64::from(x) * phi_quadrature(f64::from(x));
            assert!((f64::from(gelu_scalar(x)) - oracle).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn gelu_edge_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        assert!(gelu_scalar(-20.0).abs() == 0.0);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.8, 3.0] {
            let h = 1e-5;
            let f = |t: f64| t * 0.5 * (1.0 + erf(t * FRAC_1_SQRT_2));
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((f64::from(gelu_derivative(x as f32)) - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_stable_and_normalised() {
        let mut row = [1000.0f32, 0.0];
        softmax_in_place(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-6 && row[1].abs() < 1e-6);

        let mut flat = [0.0f32; 3];
        softmax_in_place(&mut flat);
        for v in flat {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn strided_softmax_matches_contiguous() {
        // 2×3 matrix, softmax over axis 0 (len 2, inner 3).
        let mut data = [0.1f32, 0.5, -1.0, 2.0, 0.5, 3.0];
        softmax_axis(&mut data, 1, 2, 3);
        for c in 0..3 {
            let mut col = [[0.1f32, 0.5, -1.0][c], [2.0f32, 0.5, 3.0][c]];
            softmax_in_place(&mut col);
            assert_eq!(data[c], col[0]);
            assert_eq!(data[3 + c], col[1]);
        }
    }
}
