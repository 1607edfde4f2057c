//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use lowbit::tensor::{generate, RngSpec, Tensor};
use lowbit::ternary::{self, LatentWeights, TernaryTensor};

/// `max|a - b| / max|b|`, or the absolute deviation when `b` is all zero.
pub fn normwise_rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `sum_{b,r} g[b,r] * (sum_c x[b,c] w[r,c] + lambda * sum_{c dead} w[r,c])`
/// in f64, with the deadzone mask frozen.
fn surrogate_loss(x: &Tensor, w: &[f64], q: &TernaryTensor, g: &Tensor) -> f64 {
    let (m, n, b) = (q.rows(), q.cols(), x.rows());
    let dead = q.deadzone_mask();
    let lambda = q.lambda() as f64;
    let mut total = 0.0;
    for bi in 0..b {
        for r in 0..m {
            let mut y = 0.0;
            for c in 0..n {
                y += x.data()[bi * n + c] as f64 * w[r * n + c];
                if dead[r * n + c] {
                    y += lambda * w[r * n + c];
                }
            }
            total += g.data()[bi * m + r] as f64 * y;
        }
    }
    total
}

/// Normwise relative error of the manual latent-weight gradient against
/// central differences (`h = 1e-3`). With `sum_loss` the loss is `sum(Y)`,
/// otherwise a random linear functional of `Y`.
pub fn deadzone_bias_grad_fd_error(seed: u64, m: usize, n: usize, batch: usize, sum_loss: bool) -> f64 {
    let w = LatentWeights::new(generate(&RngSpec::gaussian(seed, 0.0, 1.0), &[m, n]).unwrap()).unwrap();
    let x = generate(&RngSpec::gaussian(seed + 1, 0.0, 1.0), &[batch, n]).unwrap();
    let g = if sum_loss {
        Tensor::matrix(batch, m, vec![1.0; batch * m]).unwrap()
    } else {
        generate(&RngSpec::gaussian(seed + 2, 0.0, 1.0), &[batch, m]).unwrap()
    };
    let q = ternary::ternarize(&w).with_lambda(ternary::DEFAULT_LAMBDA);
    let grad = ternary::deadzone_bias_grad(&x, &q, &w, &g).unwrap();
    let h = 1e-3;
    let base = widen(w.tensor().data());
    let fd: Vec<f64> = (0..m * n)
        .map(|i| {
            let (mut plus, mut minus) = (base.clone(), base.clone());
            plus[i] += h;
            minus[i] -= h;
            (surrogate_loss(&x, &plus, &q, &g) - surrogate_loss(&x, &minus, &q, &g)) / (2.0 * h)
        })
        .collect();
    normwise_rel(&widen(grad.data()), &fd)
}
