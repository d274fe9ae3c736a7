// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact t-SNE with early exaggeration and per-coordinate gains.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pairwise_sq_distances;

const ITERATIONS: usize = 1000;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const MIN_GAIN: f64 = 0.01;

/// Row-conditional affinities whose entropy matches `ln(perplexity)`.
fn conditional_p(d2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d2.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut row = vec![0.0; n];
        for _ in 0..100 {
            let min = (0..n)
                .filter(|&j| j != i)
                .map(|j| d2[[i, j]])
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for (j, r) in row.iter_mut().enumerate() {
                *r = if j == i {
                    0.0
                } else {
                    (-(d2[[i, j]] - min) * beta).exp()
                };
                sum += *r;
            }
            let mut h = 0.0;
            for r in row.iter_mut() {
                *r /= sum;
                if *r > 0.0 {
                    h -= *r * r.ln();
                }
            }
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { (lo + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (lo + hi) / 2.0;
            }
        }
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    p
}

pub(crate) fn fit(x: &Array2<f64>, perplexity: f64, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    if n == 1 {
        return Array2::zeros((1, 2));
    }
    let d2 = pairwise_sq_distances(x.view(), x.view());
    let cond = conditional_p(&d2, perplexity);
    let p = (&cond + &cond.t()).mapv(|v| (v / (2.0 * n as f64)).max(1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("positive std");
    let mut y = Array2::from_shape_fn((n, 2), |_| normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let lr = (n as f64 / EXAGGERATION / 4.0).max(50.0);

    let mut num = Array2::<f64>::zeros((n, n));
    for it in 0..ITERATIONS {
        let exag = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    0.0
                } else {
                    let dx = y[[i, 0]] - y[[j, 0]];
                    let dy = y[[i, 1]] - y[[j, 1]];
                    1.0 / (1.0 + dx * dx + dy * dy)
                };
                num[[i, j]] = v;
                total += v;
            }
        }
        let total = total.max(f64::MIN_POSITIVE);
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exag * p[[i, j]] - num[[i, j]] / total) * num[[i, j]];
                grad[[i, 0]] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                *gain * 0.8
            };
            *gain = gain.max(MIN_GAIN);
            *u = momentum * *u - lr * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &mean;
    }
    y
}
