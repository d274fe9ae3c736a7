// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exact-neighbour UMAP for corpus-sized inputs.
//!
//! Follows the reference algorithm: smooth k-NN distances, fuzzy union of
//! the directed graphs, and epoch-scheduled SGD with negative sampling on
//! the `1 / (1 + a d^2b)` low-dimensional kernel. Neighbour search is brute
//! force, which is fine for the few thousand points a corpus view holds.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pairwise_sq_distances;

const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const MIN_K_DIST_SCALE: f64 = 1e-3;
const NEGATIVE_SAMPLE_RATE: usize = 5;
const FIT_EPOCHS: usize = 500;
const TRANSFORM_EPOCHS: usize = 100;
const INIT_SCALE: f64 = 10.0;

#[derive(Debug, Clone)]
pub(crate) struct UmapModel {
    pub data: Array2<f64>,
    pub embedding: Array2<f64>,
    n_neighbors: usize,
    a: f64,
    b: f64,
    seed: u64,
}

/// Fits `a`, `b` of the kernel `1 / (1 + a x^2b)` to the offset-exponential
/// target curve implied by `min_dist` (spread 1) by least squares.
pub(crate) fn fit_ab(min_dist: f64) -> (f64, f64) {
    let spread = 1.0;
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if x < min_dist {
                1.0
            } else {
                (-(x - min_dist) / spread).exp()
            }
        })
        .collect();
    let loss = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let f = 1.0 / (1.0 + a * x.powf(2.0 * b));
                (f - y).powi(2)
            })
            .sum()
    };
    // Coarse grid, then shrinking pattern search around the best cell.
    let mut best = (1.0, 1.0, f64::INFINITY);
    for bi in 0..=170 {
        let b = 0.3 + 0.01 * bi as f64;
        for ai in 0..=200 {
            let a = 10f64.powf(-1.0 + 2.0 * ai as f64 / 200.0);
            let l = loss(a, b);
            if l < best.2 {
                best = (a, b, l);
            }
        }
    }
    let (mut a, mut b, mut l) = best;
    let mut step = (0.05 * a, 0.01);
    while step.1 > 1e-7 {
        let mut moved = false;
        for (da, db) in [(step.0, 0.0), (-step.0, 0.0), (0.0, step.1), (0.0, -step.1)] {
            let (na, nb) = (a + da, b + db);
            if na <= 0.0 || nb <= 0.0 {
                continue;
            }
            let nl = loss(na, nb);
            if nl < l {
                (a, b, l) = (na, nb, nl);
                moved = true;
            }
        }
        if !moved {
            step = (step.0 / 2.0, step.1 / 2.0);
        }
    }
    (a, b)
}

/// Neighbour indices and distances sorted ascending.
fn knn(dist_row: &[f64], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut order: Vec<(usize, f64)> = dist_row
        .iter()
        .copied()
        .enumerate()
        .filter(|&(j, _)| Some(j) != skip)
        .collect();
    order.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    order.truncate(k);
    order
}

/// Returns `(sigma, rho)` so that `Σ exp(-(d - rho)+ / sigma) = log2(k)`.
fn smooth_knn(dists: &[f64], k: usize, local_connectivity: bool, mean_all: f64) -> (f64, f64) {
    let target = (k as f64).log2();
    let rho = if local_connectivity {
        dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0)
    } else {
        0.0
    };
    let (mut lo, mut hi, mut mid) = (0.0, f64::INFINITY, 1.0);
    for _ in 0..64 {
        let psum: f64 = dists
            .iter()
            .map(|&d| {
                let t = d - rho;
                if t > 0.0 {
                    (-t / mid).exp()
                } else {
                    1.0
                }
            })
            .sum();
        if (psum - target).abs() < SMOOTH_K_TOLERANCE {
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    let mean_local = dists.iter().sum::<f64>() / dists.len().max(1) as f64;
    let floor = MIN_K_DIST_SCALE * if rho > 0.0 { mean_local } else { mean_all };
    (mid.max(floor).max(f64::MIN_POSITIVE), rho)
}

fn membership(dists: &[f64], sigma: f64, rho: f64) -> Vec<f64> {
    dists
        .iter()
        .map(|&d| {
            let t = d - rho;
            if t <= 0.0 {
                1.0
            } else {
                (-t / sigma).exp()
            }
        })
        .collect()
}

/// Top two principal components, scaled so the largest coordinate is 10.
fn pca_init(x: ArrayView2<'_, f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mean = x.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered);
    let d = cov.nrows();
    let mut comps: Vec<ndarray::Array1<f64>> = Vec::new();
    for c in 0..2 {
        let mut v = ndarray::Array1::from_shape_fn(d, |i| if i == c % d { 1.0 } else { 0.5 / (1 + i) as f64 });
        for _ in 0..200 {
            let mut next = cov.dot(&v);
            for prev in &comps {
                let proj = next.dot(prev);
                next = next - prev * proj;
            }
            let norm = next.dot(&next).sqrt();
            if norm < 1e-12 {
                break;
            }
            v = next / norm;
        }
        comps.push(v);
    }
    let mut y = Array2::zeros((n, 2));
    for (c, v) in comps.iter().enumerate() {
        let col = centered.dot(v);
        y.column_mut(c).assign(&col);
    }
    let max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 1e-12 {
        y *= INIT_SCALE / max;
    }
    y.mapv_inplace(|v| v + rng.random_range(-1e-4..1e-4));
    y
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

struct Edge {
    head: usize,
    tail: usize,
    epochs_per_sample: f64,
}

fn schedule(weights: &[(usize, usize, f64)], n_epochs: usize) -> Vec<Edge> {
    let max = weights.iter().map(|e| e.2).fold(0.0, f64::max);
    weights
        .iter()
        .filter(|e| e.2 > 0.0 && e.2 >= max / n_epochs as f64)
        .map(|&(head, tail, w)| Edge {
            head,
            tail,
            epochs_per_sample: max / w,
        })
        .collect()
}

struct Sgd<'a> {
    learning_rate: f64,
    a: f64,
    b: f64,
    edges: &'a [Edge],
    n_epochs: usize,
}

impl Sgd<'_> {
    /// Optimizes `moving` against `anchors`. When `anchors` is `None`, the
    /// layout attracts and repels itself (fit); otherwise only `moving`
    /// changes (transform).
    fn run(&self, moving: &mut Array2<f64>, anchors: Option<&Array2<f64>>, rng: &mut ChaCha8Rng) {
        let (a, b) = (self.a, self.b);
        let mut next_sample: Vec<f64> = self.edges.iter().map(|e| e.epochs_per_sample).collect();
        let neg_every: Vec<f64> = self
            .edges
            .iter()
            .map(|e| e.epochs_per_sample / NEGATIVE_SAMPLE_RATE as f64)
            .collect();
        let mut next_neg = neg_every.clone();
        let pool = anchors.map_or(moving.nrows(), |x| x.nrows());
        for epoch in 0..self.n_epochs {
            let lr = self.learning_rate * (1.0 - epoch as f64 / self.n_epochs as f64);
            let e = epoch as f64;
            for (i, edge) in self.edges.iter().enumerate() {
                if next_sample[i] > e {
                    continue;
                }
                let head = edge.head;
                let tail_pos = match anchors {
                    Some(an) => [an[[edge.tail, 0]], an[[edge.tail, 1]]],
                    None => [moving[[edge.tail, 0]], moving[[edge.tail, 1]]],
                };
                let diff = [moving[[head, 0]] - tail_pos[0], moving[[head, 1]] - tail_pos[1]];
                let d2 = diff[0] * diff[0] + diff[1] * diff[1];
                let coeff = if d2 > 0.0 {
                    -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
                } else {
                    0.0
                };
                for k in 0..2 {
                    let g = clip(coeff * diff[k]) * lr;
                    moving[[head, k]] += g;
                    if anchors.is_none() {
                        moving[[edge.tail, k]] -= g;
                    }
                }
                next_sample[i] += edge.epochs_per_sample;

                let n_neg = ((e - next_neg[i]) / neg_every[i]) as usize;
                for _ in 0..n_neg {
                    let other = rng.random_range(0..pool);
                    let op = match anchors {
                        Some(an) => [an[[other, 0]], an[[other, 1]]],
                        None => [moving[[other, 0]], moving[[other, 1]]],
                    };
                    let diff = [moving[[head, 0]] - op[0], moving[[head, 1]] - op[1]];
                    let d2 = diff[0] * diff[0] + diff[1] * diff[1];
                    if d2 <= 0.0 {
                        continue;
                    }
                    let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                    for k in 0..2 {
                        moving[[head, k]] += clip(coeff * diff[k]) * lr;
                    }
                }
                next_neg[i] += n_neg as f64 * neg_every[i];
            }
        }
    }
}

impl UmapModel {
    pub fn fit(x: &Array2<f64>, n_neighbors: usize, min_dist: f64, seed: u64) -> Self {
        let n = x.nrows();
        let (a, b) = fit_ab(min_dist);
        let dist = pairwise_sq_distances(x.view(), x.view()).mapv(f64::sqrt);
        let mean_all = dist.mean().unwrap_or(0.0);
        // Directed membership strengths; the self neighbour is excluded.
        let mut w = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let row = dist.row(i).to_vec();
            let nn = knn(&row, n_neighbors - 1, Some(i));
            let dists: Vec<f64> = nn.iter().map(|p| p.1).collect();
            let (sigma, rho) = smooth_knn(&dists, n_neighbors, true, mean_all);
            for ((j, _), m) in nn.iter().zip(membership(&dists, sigma, rho)) {
                w[[i, *j]] = m;
            }
        }
        let wt = w.t();
        let sym = &w + &wt - &(&w * &wt);
        let mut weights = Vec::new();
        for ((i, j), &v) in sym.indexed_iter() {
            if v > 0.0 {
                weights.push((i, j, v));
            }
        }
        let edges = schedule(&weights, FIT_EPOCHS);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embedding = pca_init(x.view(), &mut rng);
        Sgd {
            learning_rate: 1.0,
            a,
            b,
            edges: &edges,
            n_epochs: FIT_EPOCHS,
        }
        .run(&mut embedding, None, &mut rng);
        UmapModel {
            data: x.clone(),
            embedding,
            n_neighbors,
            a,
            b,
            seed,
        }
    }

    /// Places new points into the fitted layout with the layout held fixed.
    pub fn transform(&self, y: &Array2<f64>) -> Array2<f64> {
        let m = y.nrows();
        let k = self.n_neighbors.min(self.data.nrows());
        let dist = pairwise_sq_distances(y.view(), self.data.view()).mapv(f64::sqrt);
        let mean_all = dist.mean().unwrap_or(0.0);
        let mut out = Array2::zeros((m, 2));
        let mut weights = Vec::new();
        for i in 0..m {
            let row = dist.row(i).to_vec();
            let nn = knn(&row, k, None);
            let dists: Vec<f64> = nn.iter().map(|p| p.1).collect();
            let (sigma, rho) = smooth_knn(&dists, k, false, mean_all);
            let mem = membership(&dists, sigma, rho);
            let total: f64 = mem.iter().sum();
            // An exact match starts on its training point; otherwise the
            // weighted mean of the neighbours.
            match nn.iter().find(|p| p.1 == 0.0) {
                Some(&(j, _)) => {
                    out[[i, 0]] = self.embedding[[j, 0]];
                    out[[i, 1]] = self.embedding[[j, 1]];
                }
                None => {
                    for ((j, _), wv) in nn.iter().zip(&mem) {
                        for c in 0..2 {
                            out[[i, c]] += wv / total * self.embedding[[*j, c]];
                        }
                    }
                }
            }
            for ((j, _), wv) in nn.iter().zip(&mem) {
                weights.push((i, *j, *wv));
            }
        }
        let edges = schedule(&weights, TRANSFORM_EPOCHS);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        Sgd {
            learning_rate: 0.25,
            a: self.a,
            b: self.b,
            edges: &edges,
            n_epochs: TRANSFORM_EPOCHS,
        }
        .run(&mut out, Some(&self.embedding), &mut rng);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_fit_matches_reference_constants() {
        // Reference values for min_dist = 0.1, spread = 1.
        let (a, b) = fit_ab(0.1);
        assert!((a - 1.577).abs() < 0.02, "a = {a}");
        assert!((b - 0.895).abs() < 0.01, "b = {b}");
    }

    #[test]
    fn smooth_knn_hits_log2_k() {
        let dists = [0.5, 0.9, 1.3, 2.0, 2.2];
        let (sigma, rho) = smooth_knn(&dists, 6, true, 1.0);
        assert_eq!(rho, 0.5);
        let total: f64 = membership(&dists, sigma, rho).iter().sum();
        assert!((total - 6f64.log2()).abs() < 1e-4);
    }
}
