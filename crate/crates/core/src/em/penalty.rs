//! Penalty families on the cluster means and their closed-form M-step
//! updates.
//!
//! All updates work from the responsibility-weighted sufficient statistics
//! `T_k = Σ_i τ_ik` and `S_kj = Σ_i τ_ik b_ij`, with the variances of the
//! previous iterate.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    None,
    Individual,
    Variable,
    Group,
}

impl PenaltyKind {
    pub const PENALIZED: [PenaltyKind; 3] = [PenaltyKind::Individual, PenaltyKind::Variable, PenaltyKind::Group];

    pub fn as_str(&self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::Individual => "individual",
            PenaltyKind::Variable => "variable",
            PenaltyKind::Group => "group",
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PenaltyKind::None),
            "individual" => Ok(PenaltyKind::Individual),
            "variable" => Ok(PenaltyKind::Variable),
            "group" => Ok(PenaltyKind::Group),
            other => Err(Error::InvalidArgument(format!("unknown penalty kind `{other}`"))),
        }
    }
}

/// Adaptive weights. `Entry` holds one weight per (cluster, column) for the
/// individual and variable penalties, `Cluster` one weight per cluster for
/// the group penalty. An infinite weight pins the matching mean to zero.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyWeights {
    Unit,
    Entry(DMatrix<f64>),
    Cluster(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub gamma: f64,
    pub weights: PenaltyWeights,
    pub reference_means: Option<DMatrix<f64>>,
}

impl PenaltySpec {
    pub fn none() -> Self {
        Self {
            kind: PenaltyKind::None,
            lambda: 0.0,
            gamma: 0.0,
            weights: PenaltyWeights::Unit,
            reference_means: None,
        }
    }

    /// Penalty with all weights equal to one (the γ = 0 pilot fit).
    pub fn unit(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        check_lambda(kind, lambda)?;
        Ok(Self {
            kind,
            lambda: if kind == PenaltyKind::None { 0.0 } else { lambda },
            gamma: 0.0,
            weights: PenaltyWeights::Unit,
            reference_means: None,
        })
    }

    /// Adaptive weights `1/|μ̃_kj|^γ` (individual, variable) or
    /// `1/||μ̃_k||^γ` (group) built from pilot means.
    pub fn adaptive(kind: PenaltyKind, lambda: f64, gamma: f64, reference: &DMatrix<f64>) -> Result<Self> {
        check_lambda(kind, lambda)?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        let weights = match kind {
            PenaltyKind::None => PenaltyWeights::Unit,
            PenaltyKind::Individual | PenaltyKind::Variable => {
                PenaltyWeights::Entry(reference.map(|v| 1.0 / v.abs().powf(gamma)))
            }
            PenaltyKind::Group => PenaltyWeights::Cluster(
                reference
                    .row_iter()
                    .map(|row| 1.0 / row.norm().powf(gamma))
                    .collect(),
            ),
        };
        Ok(Self {
            kind,
            lambda: if kind == PenaltyKind::None { 0.0 } else { lambda },
            gamma,
            weights,
            reference_means: Some(reference.clone()),
        })
    }

    /// True when the penalty has no effect on the fit.
    pub fn is_inactive(&self) -> bool {
        self.kind == PenaltyKind::None || self.lambda == 0.0
    }

    pub fn entry_weight(&self, k: usize, j: usize) -> f64 {
        match &self.weights {
            PenaltyWeights::Entry(w) => w[(k, j)],
            _ => 1.0,
        }
    }

    pub fn cluster_weight(&self, k: usize) -> f64 {
        match &self.weights {
            PenaltyWeights::Cluster(w) => w[k],
            _ => 1.0,
        }
    }

    pub(crate) fn check_shape(&self, m: usize, q: usize) -> Result<()> {
        let ok = match &self.weights {
            PenaltyWeights::Unit => true,
            PenaltyWeights::Entry(w) => w.shape() == (m, q),
            PenaltyWeights::Cluster(w) => w.len() == m,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("penalty weights do not match m={m}, q={q}")))
        }
    }

    /// Cluster charged by the variable penalty in column `j`: the largest
    /// |mean|, ties going to the smallest weight and then the lowest index.
    pub fn variable_argmax(&self, column: &[f64], j: usize) -> usize {
        let top = column.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in column.iter().enumerate() {
            let w = self.entry_weight(k, j);
            if v.abs() == top && best.is_none_or(|(_, bw)| w < bw) {
                best = Some((k, w));
            }
        }
        best.map_or(0, |(k, _)| k)
    }

    /// Zeroes the means held at zero by infinite weights.
    pub fn apply_pins(&self, means: &mut DMatrix<f64>) {
        if self.is_inactive() {
            return;
        }
        match &self.weights {
            PenaltyWeights::Unit => {}
            PenaltyWeights::Entry(w) => match self.kind {
                PenaltyKind::Individual => {
                    for (mu, wt) in means.iter_mut().zip(w.iter()) {
                        if wt.is_infinite() {
                            *mu = 0.0;
                        }
                    }
                }
                PenaltyKind::Variable => {
                    for j in 0..means.ncols() {
                        let col: Vec<f64> = means.column(j).iter().copied().collect();
                        let k_star = self.variable_argmax(&col, j);
                        if w[(k_star, j)].is_infinite() {
                            means.column_mut(j).fill(0.0);
                        }
                    }
                }
                _ => {}
            },
            PenaltyWeights::Cluster(w) => {
                for (k, wt) in w.iter().enumerate() {
                    if wt.is_infinite() {
                        means.row_mut(k).fill(0.0);
                    }
                }
            }
        }
    }

    /// Value of the penalty term at `means`.
    pub fn value(&self, means: &DMatrix<f64>, q_c: usize) -> f64 {
        if self.is_inactive() {
            return 0.0;
        }
        let (m, q) = means.shape();
        let mut total = 0.0;
        match self.kind {
            PenaltyKind::None => {}
            PenaltyKind::Individual => {
                for k in 0..m {
                    for j in 0..q {
                        let mu = means[(k, j)];
                        if mu != 0.0 {
                            total += self.entry_weight(k, j) * mu.abs();
                        }
                    }
                }
            }
            PenaltyKind::Variable => {
                for j in 0..q {
                    let col: Vec<f64> = means.column(j).iter().copied().collect();
                    let k_star = self.variable_argmax(&col, j);
                    let top = means[(k_star, j)].abs();
                    if top != 0.0 {
                        total += self.entry_weight(k_star, j) * top;
                    }
                }
            }
            PenaltyKind::Group => {
                let root = (q_c as f64).sqrt();
                for k in 0..m {
                    for s in 0..q / q_c {
                        let norm = means.view((k, s * q_c), (1, q_c)).norm();
                        if norm != 0.0 {
                            total += self.cluster_weight(k) * root * norm;
                        }
                    }
                }
            }
        }
        self.lambda * total
    }
}

fn check_lambda(kind: PenaltyKind, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if kind == PenaltyKind::None && lambda != 0.0 {
        return Err(Error::InvalidArgument("penalty kind `none` requires lambda = 0".into()));
    }
    Ok(())
}

/// Responsibility-weighted totals and column sums per cluster.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `T_k = Σ_i τ_ik`
    pub totals: Vec<f64>,
    /// `S_kj = Σ_i τ_ik b_ij`, m × q
    pub sums: DMatrix<f64>,
}

impl SufficientStats {
    pub fn compute(b: &DMatrix<f64>, tau: &DMatrix<f64>) -> Result<Self> {
        let (n, q) = b.shape();
        if tau.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "responsibilities have {} rows, data has {n}",
                tau.nrows()
            )));
        }
        let m = tau.ncols();
        let totals: Vec<f64> = (0..m).map(|k| tau.column(k).sum()).collect();
        if let Some(k) = totals.iter().position(|&t| !(t > 1e-12)) {
            return Err(Error::EmptyCluster(k));
        }
        let mut sums = DMatrix::zeros(m, q);
        for j in 0..q {
            let col = b.column(j);
            for k in 0..m {
                sums[(k, j)] = tau.column(k).dot(&col);
            }
        }
        Ok(Self { totals, sums })
    }

    /// Unpenalized means `μ̃_kj = S_kj / T_k`.
    pub fn means(&self) -> DMatrix<f64> {
        let mut out = self.sums.clone();
        for (k, mut row) in out.row_iter_mut().enumerate() {
            row /= self.totals[k];
        }
        out
    }
}

/// Soft-thresholded means: `(S/T)(1 − λ w σ² / |S|)_+` per entry.
pub fn individual_update(stats: &SufficientStats, variances: &[f64], spec: &PenaltySpec) -> DMatrix<f64> {
    let mut means = stats.means();
    if spec.is_inactive() {
        return means;
    }
    let (m, q) = means.shape();
    for k in 0..m {
        for j in 0..q {
            let w = spec.entry_weight(k, j);
            let s = stats.sums[(k, j)];
            let threshold = spec.lambda * w * variances[j];
            if w.is_infinite() || s.abs() <= threshold {
                means[(k, j)] = 0.0;
            } else {
                means[(k, j)] *= 1.0 - threshold / s.abs();
            }
        }
    }
    means
}

/// Variable penalty: per column, the exact minimizer of
/// `Σ_k (T_k μ_k² − 2 S_k μ_k)/(2σ²) + λ w_{k*} max_k |μ_k|`, with `k*` the
/// (lowest-index) cluster attaining the maximum.
///
/// For each candidate `k*` the optimum clips every mean to a common level
/// `c` and sets `|μ_{k*}| = c`; the level solves a piecewise-linear equation.
/// The candidate (or the zero column) with the smallest objective wins.
/// When the soft-thresholded `k*` entry stays the largest this is the plain
/// update `sign(μ̃)(|μ̃| − λ w σ²/T)_+` with the other clusters untouched.
pub fn variable_update(stats: &SufficientStats, variances: &[f64], spec: &PenaltySpec) -> DMatrix<f64> {
    let mut means = stats.means();
    if spec.is_inactive() {
        return means;
    }
    let m = means.nrows();
    for j in 0..means.ncols() {
        let var = variances[j];
        let sums: Vec<f64> = (0..m).map(|k| stats.sums[(k, j)]).collect();
        let objective = |mu: &[f64]| {
            let fit: f64 = (0..m)
                .map(|k| (stats.totals[k] * mu[k] * mu[k] - 2.0 * sums[k] * mu[k]) / (2.0 * var))
                .sum();
            let k_star = spec.variable_argmax(mu, j);
            let top = mu[k_star].abs();
            if top == 0.0 {
                fit
            } else {
                fit + spec.lambda * spec.entry_weight(k_star, j) * top
            }
        };
        let mut best = vec![0.0; m];
        let mut best_value = objective(&best);
        for k_star in 0..m {
            let w = spec.entry_weight(k_star, j);
            if w.is_infinite() {
                continue;
            }
            let level = clip_level(&stats.totals, &sums, k_star, spec.lambda * w * var);
            if level == 0.0 {
                continue;
            }
            let candidate: Vec<f64> = (0..m)
                .map(|k| {
                    let mu_tilde = sums[k] / stats.totals[k];
                    if k == k_star {
                        if mu_tilde < 0.0 {
                            -level
                        } else {
                            level
                        }
                    } else {
                        mu_tilde.signum() * mu_tilde.abs().min(level)
                    }
                })
                .collect();
            let value = objective(&candidate);
            if value < best_value {
                best_value = value;
                best = candidate;
            }
        }
        for (k, v) in best.into_iter().enumerate() {
            means[(k, j)] = v;
        }
    }
    means
}

/// Root `c >= 0` of `Σ_{k≠k*} T_k (a_k − c)_+ + T_{k*} (a_{k*} − c) = t`
/// with `a_k = |S_k|/T_k`; zero when the left side at `c = 0` is `<= t`.
fn clip_level(totals: &[f64], sums: &[f64], k_star: usize, t: f64) -> f64 {
    let a = |k: usize| sums[k].abs() / totals[k];
    if sums.iter().map(|s| s.abs()).sum::<f64>() <= t {
        return 0.0;
    }
    let mut others: Vec<usize> = (0..sums.len()).filter(|&k| k != k_star).collect();
    others.sort_by(|&x, &y| a(y).total_cmp(&a(x)));
    let mut num = sums[k_star].abs() - t;
    let mut den = totals[k_star];
    for &k in &others {
        let c = num / den;
        if c >= a(k) {
            return c.max(0.0);
        }
        num += sums[k].abs();
        den += totals[k];
    }
    (num / den).max(0.0)
}

/// Group penalty: each (cluster, sensor) block is the exact minimizer of
/// `½ Σ_l (T μ_l² − 2 S_l μ_l)/σ²_l + c ||μ||` with `c = λ w_k √q_c`.
///
/// The block is zero iff `||(S_l/σ²_l)_l|| <= c`. Otherwise the minimizer is
/// the fixed point `μ = (I + c/(T ρ) Σ_s)^{-1} μ̃` with `ρ = ||μ||`, where `ρ`
/// is the root of `Σ_l (S_l / (T ρ + c σ²_l))² = 1`.
pub fn group_update(stats: &SufficientStats, variances: &[f64], spec: &PenaltySpec, q_c: usize) -> DMatrix<f64> {
    let mut means = stats.means();
    if spec.is_inactive() {
        return means;
    }
    let (m, q) = means.shape();
    let root = (q_c as f64).sqrt();
    for k in 0..m {
        let w = spec.cluster_weight(k);
        let c = spec.lambda * w * root;
        let t = stats.totals[k];
        for s in 0..q / q_c {
            let cols = s * q_c..(s + 1) * q_c;
            let sums: Vec<f64> = cols.clone().map(|j| stats.sums[(k, j)]).collect();
            let vars = &variances[cols.clone()];
            let score_norm = sums.iter().zip(vars).map(|(s, v)| (s / v).powi(2)).sum::<f64>().sqrt();
            if w.is_infinite() || score_norm <= c {
                for j in cols {
                    means[(k, j)] = 0.0;
                }
                continue;
            }
            let rho = block_norm(&sums, vars, t, c);
            for (l, j) in cols.enumerate() {
                means[(k, j)] = rho * sums[l] / (t * rho + c * vars[l]);
            }
        }
    }
    means
}

/// Root of `h(ρ) = Σ_l S_l² / (T ρ + c σ²_l)² − 1` on `ρ > 0`, assuming
/// `h(0) > 0`. `h` is convex and decreasing, so Newton from zero increases
/// monotonically to the root.
fn block_norm(sums: &[f64], vars: &[f64], t: f64, c: f64) -> f64 {
    let upper = sums.iter().map(|s| s * s).sum::<f64>().sqrt() / t;
    let mut rho = 0.0f64;
    for _ in 0..200 {
        let mut h = -1.0;
        let mut dh = 0.0;
        for (s, v) in sums.iter().zip(vars) {
            let d = t * rho + c * v;
            h += s * s / (d * d);
            dh -= 2.0 * t * s * s / (d * d * d);
        }
        if h <= 0.0 {
            break;
        }
        let step = -h / dh;
        let next = (rho + step).min(upper);
        if next - rho <= 1e-15 * upper {
            rho = next;
            break;
        }
        rho = next;
    }
    rho
}
