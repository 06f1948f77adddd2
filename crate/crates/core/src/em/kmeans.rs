//! k-means (k-means++ seeding, Lloyd iterations) used to start EM.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds::derive_seed;

const MAX_LLOYD_ITER: usize = 100;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
}

fn sq_dist_to(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, k: usize) -> f64 {
    (0..x.ncols()).map(|j| (x[(i, j)] - c[(k, j)]).powi(2)).sum()
}

fn plus_plus_seeds(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, q) = x.shape();
    let mut centroids = DMatrix::zeros(k, q);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_to(x, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist_to(x, i, &centroids, c));
        }
    }
    centroids
}

/// One Lloyd run; `None` if a cluster empties.
fn lloyd(x: &DMatrix<f64>, mut centroids: DMatrix<f64>) -> Option<KMeansFit> {
    let (n, q) = x.shape();
    let k = centroids.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITER {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist_to(x, i, &centroids, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            if *label != best.0 {
                *label = best.0;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::<f64>::zeros(k, q);
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..q {
                sums[(l, j)] += x[(i, j)];
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for j in 0..q {
                centroids[(c, j)] = sums[(c, j)] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist_to(x, i, &centroids, l))
        .sum();
    Some(KMeansFit {
        labels,
        centroids,
        inertia,
    })
}

/// Best of `restarts` k-means++ runs by inertia. Runs that end with an empty
/// cluster are discarded; if all do, the call fails.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Result<KMeansFit> {
    let n = x.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
        let seeds = plus_plus_seeds(x, k, &mut rng);
        if let Some(fit) = lloyd(x, seeds) {
            if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
                best = Some(fit);
            }
        }
    }
    best.ok_or(Error::Numerical(format!(
        "k-means with k={k} produced an empty cluster in all {restarts} restarts"
    )))
}
