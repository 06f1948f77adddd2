//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Diagonal Gaussian mixture with one variance per column shared by all
/// clusters, written with plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub pi: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub var: Vec<f64>,
}

fn responsibilities(x: &[Vec<f64>], g: &Gmm) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let logs: Vec<f64> = (0..g.pi.len())
                .map(|k| {
                    let mut l = g.pi[k].ln();
                    for (j, &v) in row.iter().enumerate() {
                        let d = v - g.mu[k][j];
                        l -= 0.5 * ((2.0 * PI * g.var[j]).ln() + d * d / g.var[j]);
                    }
                    l
                })
                .collect();
            let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Textbook EM until no parameter moves by more than `tol`.
pub fn plain_em(x: &[Vec<f64>], start: &Gmm, tol: f64, max_iter: usize) -> (Gmm, usize) {
    let n = x.len();
    let q = x[0].len();
    let m = start.pi.len();
    let mut g = start.clone();
    for it in 1..=max_iter {
        let r = responsibilities(x, &g);
        let mut next = Gmm {
            pi: vec![0.0; m],
            mu: vec![vec![0.0; q]; m],
            var: vec![0.0; q],
        };
        for k in 0..m {
            let nk: f64 = r.iter().map(|ri| ri[k]).sum();
            next.pi[k] = nk / n as f64;
            for j in 0..q {
                next.mu[k][j] = r.iter().zip(x).map(|(ri, xi)| ri[k] * xi[j]).sum::<f64>() / nk;
            }
        }
        for j in 0..q {
            let mut acc = 0.0;
            for (ri, xi) in r.iter().zip(x) {
                for k in 0..m {
                    let d = xi[j] - next.mu[k][j];
                    acc += ri[k] * d * d;
                }
            }
            next.var[j] = acc / n as f64;
        }
        let moved = max_abs_diff(&g, &next);
        g = next;
        if moved < tol {
            return (g, it);
        }
    }
    (g, max_iter)
}

pub fn max_abs_diff(a: &Gmm, b: &Gmm) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.pi.iter().zip(&b.pi) {
        d = d.max((x - y).abs());
    }
    for (ra, rb) in a.mu.iter().zip(&b.mu) {
        for (x, y) in ra.iter().zip(rb) {
            d = d.max((x - y).abs());
        }
    }
    for (x, y) in a.var.iter().zip(&b.var) {
        d = d.max((x - y).abs());
    }
    d
}

/// Smallest parameter distance over all cluster relabelings of `b`.
pub fn aligned_distance(a: &Gmm, b: &Gmm) -> f64 {
    permutations(a.pi.len())
        .into_iter()
        .map(|perm| {
            let pb = Gmm {
                pi: perm.iter().map(|&k| b.pi[k]).collect(),
                mu: perm.iter().map(|&k| b.mu[k].clone()).collect(),
                var: b.var.clone(),
            };
            max_abs_diff(a, &pb)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(m - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, m - 1);
            out.push(q);
        }
    }
    out
}

/// Golden-section minimum of `f` on `[lo, hi]`.
pub fn golden(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..iters {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Dense grid over `[lo, hi]`, then golden refinement around the best grid
/// point. The end points and `extra` points are also tried.
pub fn grid_golden(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, steps: usize, extra: &[f64]) -> (f64, f64) {
    let h = (hi - lo) / steps as f64;
    let (mut best_x, mut best_f) = (lo, f(lo));
    for i in 1..=steps {
        let x = lo + h * i as f64;
        let v = f(x);
        if v < best_f {
            best_x = x;
            best_f = v;
        }
    }
    let (gx, gf) = golden(f, (best_x - h).max(lo), (best_x + h).min(hi), 120);
    let mut best = if gf < best_f { (gx, gf) } else { (best_x, best_f) };
    for &x in extra {
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Two Gaussian clouds in `q` columns, shifted by ±`gap` in each column,
/// with unequal column scales.
pub fn two_clusters(seed: u64, n: usize, q: usize, gap: f64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sign = if i % 3 == 0 { -1.0 } else { 1.0 };
            (0..q)
                .map(|j| sign * gap + (0.5 + 0.25 * j as f64) * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}
