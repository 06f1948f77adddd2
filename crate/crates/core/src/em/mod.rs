//! Penalized EM for a Gaussian mixture with a shared diagonal covariance.
//!
//! One iteration is an E-step (responsibilities and proportions) followed by
//! two conditional M-steps: the penalty-specific mean update with the
//! previous variances, then the variance update with the new means. Each
//! step minimizes the expected penalized objective in its own block, so the
//! observed-data penalized objective does not increase for the individual
//! and group penalties.

pub mod kmeans;
pub mod penalty;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::CoefficientMatrix;
use crate::seeds::derive_seed;

pub use penalty::{PenaltyKind, PenaltySpec, PenaltyWeights, SufficientStats};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound on variances inside EM.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Lower bound on variances produced by the k-means start.
pub const INIT_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub proportions: Vec<f64>,
    /// m × q
    pub means: DMatrix<f64>,
    pub variances: Vec<f64>,
}

impl MixtureParams {
    pub fn m(&self) -> usize {
        self.proportions.len()
    }

    pub fn q(&self) -> usize {
        self.variances.len()
    }

    /// Entries of the mean matrix that are exactly zero.
    pub fn zero_mask(&self) -> DMatrix<bool> {
        self.means.map(|v| v == 0.0)
    }

    pub fn n_zero_means(&self) -> usize {
        self.means.iter().filter(|&&v| v == 0.0).count()
    }

    /// Sensors whose means are zero in every cluster and component.
    pub fn removed_sensors(&self, q_c: usize) -> Vec<usize> {
        let p = self.q() / q_c;
        (0..p)
            .filter(|&s| {
                self.means
                    .columns(s * q_c, q_c)
                    .iter()
                    .all(|&v| v == 0.0)
            })
            .collect()
    }

    /// Columns (transformed variables) whose means are zero in every cluster.
    pub fn removed_columns(&self) -> Vec<usize> {
        (0..self.q())
            .filter(|&j| self.means.column(j).iter().all(|&v| v == 0.0))
            .collect()
    }

    /// Same model with clusters reordered: new cluster `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let means = DMatrix::from_fn(self.m(), self.q(), |k, j| self.means[(perm[k], j)]);
        Self {
            proportions: perm.iter().map(|&k| self.proportions[k]).collect(),
            means,
            variances: self.variances.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 || self.means.shape() != (m, self.q()) {
            return Err(Error::ShapeMismatch(format!(
                "means are {:?} for m={m}, q={}",
                self.means.shape(),
                self.q()
            )));
        }
        let sum: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("proportions must be >= 0 and sum to 1 (sum {sum})")));
        }
        if self.variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("variances must be positive and finite".into()));
        }
        Ok(())
    }

    fn change_from(&self, other: &Self) -> f64 {
        let dm: f64 = self.means.iter().zip(other.means.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let dv: f64 = self.variances.iter().zip(&other.variances).map(|(a, b)| (a - b).powi(2)).sum();
        let dp: f64 = self.proportions.iter().zip(&other.proportions).map(|(a, b)| (a - b).powi(2)).sum();
        (dm + dv + dp).sqrt()
    }
}

/// n × m posterior cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(pub DMatrix<f64>);

impl Responsibilities {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Per-row argmax; ties go to the lowest cluster index.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.0
            .row_iter()
            .map(|row| {
                let mut best = (0, f64::NEG_INFINITY);
                for (k, &v) in row.iter().enumerate() {
                    if v > best.1 {
                        best = (k, v);
                    }
                }
                best.0
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub responsibilities: Responsibilities,
    pub proportions: Vec<f64>,
    /// `Σ_i log g(b_i)` at the parameters the step was computed from.
    pub log_likelihood: f64,
}

/// `log π_k + log f_k(b_i)` for every observation and cluster.
fn log_joint(b: &DMatrix<f64>, params: &MixtureParams) -> DMatrix<f64> {
    let (n, q) = b.shape();
    let m = params.m();
    let log_det: f64 = params.variances.iter().map(|v| v.ln()).sum();
    let base = -0.5 * (q as f64 * LN_2PI + log_det);
    let mut quad = DMatrix::<f64>::zeros(n, m);
    for j in 0..q {
        let inv = 1.0 / params.variances[j];
        let col = b.column(j);
        for k in 0..m {
            let mu = params.means[(k, j)];
            let mut dst = quad.column_mut(k);
            for (d, &x) in dst.iter_mut().zip(col.iter()) {
                let r = x - mu;
                *d += r * r * inv;
            }
        }
    }
    for k in 0..m {
        let lp = params.proportions[k].ln();
        for v in quad.column_mut(k).iter_mut() {
            *v = lp + base - 0.5 * *v;
        }
    }
    quad
}

/// Posterior responsibilities (log-domain normalized) and updated
/// proportions.
pub fn e_step(b: &DMatrix<f64>, params: &MixtureParams) -> Result<EStep> {
    if b.ncols() != params.q() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} columns, model has {}",
            b.ncols(),
            params.q()
        )));
    }
    let (n, m) = (b.nrows(), params.m());
    let mut tau = log_joint(b, params);
    let mut total = 0.0;
    for i in 0..n {
        let mut row = tau.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numerical(format!("all cluster densities vanish for observation {i}")));
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
        total += max + sum.ln();
    }
    let proportions = (0..m).map(|k| tau.column(k).sum() / n as f64).collect();
    Ok(EStep {
        responsibilities: Responsibilities(tau),
        proportions,
        log_likelihood: total,
    })
}

/// `σ²_j = Σ_k Σ_i τ_ik (b_ij − μ_kj)² / n`, floored at [`VARIANCE_FLOOR`].
/// Also returns the columns that hit the floor.
pub fn update_variances(b: &DMatrix<f64>, tau: &DMatrix<f64>, means: &DMatrix<f64>) -> (Vec<f64>, Vec<usize>) {
    let (n, q) = b.shape();
    let m = tau.ncols();
    let mut floored = Vec::new();
    let vars = (0..q)
        .map(|j| {
            let col = b.column(j);
            let mut acc = 0.0;
            for k in 0..m {
                let mu = means[(k, j)];
                acc += tau
                    .column(k)
                    .iter()
                    .zip(col.iter())
                    .map(|(t, x)| t * (x - mu) * (x - mu))
                    .sum::<f64>();
            }
            let v = acc / n as f64;
            if v < VARIANCE_FLOOR || !v.is_finite() {
                floored.push(j);
                VARIANCE_FLOOR
            } else {
                v
            }
        })
        .collect();
    if !floored.is_empty() {
        log::warn!("variance floor applied to columns {floored:?}");
    }
    (vars, floored)
}

/// Responsibility-weighted cluster means without any penalty.
pub fn unpenalized_means(b: &DMatrix<f64>, tau: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(SufficientStats::compute(b, tau)?.means())
}

/// Mean update for the penalty in `spec`; `q_c` is the block size used by
/// the group penalty.
pub fn update_means(stats: &SufficientStats, variances: &[f64], spec: &PenaltySpec, q_c: usize) -> DMatrix<f64> {
    match spec.kind {
        PenaltyKind::None => stats.means(),
        PenaltyKind::Individual => penalty::individual_update(stats, variances, spec),
        PenaltyKind::Variable => penalty::variable_update(stats, variances, spec),
        PenaltyKind::Group => penalty::group_update(stats, variances, spec, q_c),
    }
}

/// Both forms of the penalized negative log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// `−Σ_i log g(b_i) + p_λ(θ)`
    pub observed: f64,
    /// `−Σ_i Σ_k τ_ik {log π_k + log f_k(b_i)} + p_λ(θ)`
    pub complete: f64,
    pub penalty: f64,
}

pub fn penalized_nll(
    b: &CoefficientMatrix,
    params: &MixtureParams,
    spec: &PenaltySpec,
    tau: &Responsibilities,
) -> Result<Objective> {
    let scores = b.scores();
    if tau.0.shape() != (scores.nrows(), params.m()) {
        return Err(Error::ShapeMismatch("responsibilities do not match data and model".into()));
    }
    let joint = log_joint(scores, params);
    let penalty = spec.value(&params.means, b.q_c());
    let mut observed = 0.0;
    for row in joint.row_iter() {
        let max = row.max();
        observed -= max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    }
    let complete = -joint.iter().zip(tau.0.iter()).map(|(l, t)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>();
    Ok(Objective {
        observed: observed + penalty,
        complete: complete + penalty,
        penalty,
    })
}

/// Observed-data negative log-likelihood without penalty.
pub fn observed_nll(b: &DMatrix<f64>, params: &MixtureParams) -> f64 {
    let joint = log_joint(b, params);
    joint
        .row_iter()
        .map(|row| {
            let max = row.max();
            -(max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
        })
        .sum()
}

/// Starting values from k-means: cluster shares, centroids, and pooled
/// within-cluster column variances.
pub fn initialize(b: &CoefficientMatrix, m: usize, seed: u64) -> Result<MixtureParams> {
    let scores = b.scores();
    let (n, q) = scores.shape();
    if m == 0 || n < m {
        return Err(Error::InvalidArgument(format!("need 1 <= m <= n, got m={m}, n={n}")));
    }
    let fit = kmeans::kmeans(scores, m, seed, 10)?;
    let mut counts = vec![0usize; m];
    for &l in &fit.labels {
        counts[l] += 1;
    }
    let mut variances = vec![0.0; q];
    for (i, &l) in fit.labels.iter().enumerate() {
        for (j, v) in variances.iter_mut().enumerate() {
            *v += (scores[(i, j)] - fit.centroids[(l, j)]).powi(2);
        }
    }
    for v in variances.iter_mut() {
        *v = (*v / n as f64).max(INIT_VARIANCE_FLOOR);
    }
    Ok(MixtureParams {
        proportions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        means: fit.centroids,
        variances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Re-initializations with fresh seeds after an empty-cluster collapse.
    pub restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 500,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: MixtureParams,
    pub responsibilities: Responsibilities,
    pub hard_labels: Vec<usize>,
    /// Observed-data penalized objective at the final parameters.
    pub penalized_nll: f64,
    /// Observed-data negative log-likelihood at the final parameters.
    pub plain_nll: f64,
    pub n_zero_means: usize,
    pub removed_sensors: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub kind: PenaltyKind,
    pub lambda: f64,
    pub gamma: f64,
    /// Observed-data penalized objective at every iterate, starting values
    /// included.
    pub objective_trace: Vec<f64>,
}

impl FitResult {
    /// Largest increase of the penalized objective between iterations.
    pub fn max_objective_increase(&self) -> f64 {
        self.objective_trace
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0)
    }
}

/// Runs EM from k-means starting values; see [`run_em_from`].
pub fn run_em(
    b: &CoefficientMatrix,
    m: usize,
    spec: &PenaltySpec,
    seed: u64,
    options: &EmOptions,
) -> Result<FitResult> {
    let init = initialize(b, m, seed)?;
    run_em_from(b, &init, spec, seed, options)
}

/// Runs EM from the given starting values. If a cluster empties, EM is
/// restarted from a fresh k-means start (derived seeds) up to
/// `options.restarts` times; after that the last attempt is returned flagged
/// as not converged.
pub fn run_em_from(
    b: &CoefficientMatrix,
    init: &MixtureParams,
    spec: &PenaltySpec,
    seed: u64,
    options: &EmOptions,
) -> Result<FitResult> {
    init.validate()?;
    if init.q() != b.q() {
        return Err(Error::ShapeMismatch(format!(
            "initial model has {} columns, data has {}",
            init.q(),
            b.q()
        )));
    }
    spec.check_shape(init.m(), init.q())?;
    let mut start = init.clone();
    let mut attempt = 0;
    loop {
        match em_loop(b, &start, spec, options) {
            Ok(fit) => return Ok(fit),
            Err((Error::EmptyCluster(k), last)) => {
                attempt += 1;
                if attempt > options.restarts {
                    log::warn!("cluster {k} emptied in every restart; returning non-converged fit");
                    return finish(b, last, spec, 0, false, Vec::new());
                }
                log::debug!("cluster {k} emptied; restarting EM (attempt {attempt})");
                start = initialize(b, init.m(), derive_seed(seed, 1000 + attempt as u64))?;
            }
            Err((e, _)) => return Err(e),
        }
    }
}

type LoopError = (Error, MixtureParams);

fn em_loop(
    b: &CoefficientMatrix,
    init: &MixtureParams,
    spec: &PenaltySpec,
    options: &EmOptions,
) -> std::result::Result<FitResult, LoopError> {
    let scores = b.scores();
    let q_c = b.q_c();
    let mut params = init.clone();
    spec.apply_pins(&mut params.means);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        let estep = e_step(scores, &params).map_err(|e| (e, params.clone()))?;
        trace.push(-estep.log_likelihood + spec.value(&params.means, q_c));
        let tau = estep.responsibilities.matrix();
        let stats = SufficientStats::compute(scores, tau).map_err(|e| (e, params.clone()))?;
        let means = update_means(&stats, &params.variances, spec, q_c);
        let (variances, _) = update_variances(scores, tau, &means);
        let next = MixtureParams {
            proportions: estep.proportions,
            means,
            variances,
        };
        let change = next.change_from(&params);
        params = next;
        iterations += 1;
        if !change.is_finite() {
            return Err((Error::Numerical("parameter update is not finite".into()), params));
        }
        if change <= options.tol {
            converged = true;
            break;
        }
    }
    finish(b, params.clone(), spec, iterations, converged, trace).map_err(|e| (e, params))
}

fn finish(
    b: &CoefficientMatrix,
    params: MixtureParams,
    spec: &PenaltySpec,
    iterations: usize,
    converged: bool,
    mut trace: Vec<f64>,
) -> Result<FitResult> {
    let estep = e_step(b.scores(), &params)?;
    let plain_nll = -estep.log_likelihood;
    let penalized_nll = plain_nll + spec.value(&params.means, b.q_c());
    trace.push(penalized_nll);
    let hard_labels = estep.responsibilities.hard_labels();
    Ok(FitResult {
        n_zero_means: params.n_zero_means(),
        removed_sensors: params.removed_sensors(b.q_c()),
        params,
        responsibilities: estep.responsibilities,
        hard_labels,
        penalized_nll,
        plain_nll,
        iterations,
        converged,
        kind: spec.kind,
        lambda: spec.lambda,
        gamma: spec.gamma,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(n: usize, q: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Two clouds centred at ±`gap` in every column.
    fn two_clouds(n_each: usize, q: usize, gap: f64, seed: u64) -> CoefficientMatrix {
        let noise = random_matrix(2 * n_each, q, seed);
        let x = DMatrix::from_fn(2 * n_each, q, |i, j| {
            noise[(i, j)] * 0.3 + if i < n_each { -gap } else { gap }
        });
        CoefficientMatrix::from_matrix(x, 1).unwrap()
    }

    #[test]
    fn single_cluster_initialization() {
        let b = CoefficientMatrix::from_matrix(random_matrix(30, 4, 1), 2).unwrap();
        let p = initialize(&b, 1, 5).unwrap();
        assert_eq!(p.proportions, vec![1.0]);
        for j in 0..4 {
            let col = b.scores().column(j);
            let mean = col.mean();
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 30.0;
            assert_abs_diff_eq!(p.means[(0, j)], mean, epsilon = 1e-12);
            assert_abs_diff_eq!(p.variances[j], var, epsilon = 1e-12);
        }
    }

    #[test]
    fn initialization_finds_separated_centres() {
        let b = two_clouds(40, 3, 5.0, 2);
        let p = initialize(&b, 2, 9).unwrap();
        let mut centres: Vec<f64> = (0..2).map(|k| p.means[(k, 0)]).collect();
        centres.sort_by(f64::total_cmp);
        assert!((centres[0] + 5.0).abs() < 0.1);
        assert!((centres[1] - 5.0).abs() < 0.1);
        assert_eq!(p, initialize(&b, 2, 9).unwrap());
    }

    #[test]
    fn e_step_single_cluster() {
        let b = random_matrix(10, 3, 4);
        let p = MixtureParams {
            proportions: vec![1.0],
            means: DMatrix::zeros(1, 3),
            variances: vec![1.0; 3],
        };
        let e = e_step(&b, &p).unwrap();
        assert!(e.responsibilities.matrix().iter().all(|&t| t == 1.0));
    }

    #[test]
    fn e_step_symmetric_point() {
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let p = MixtureParams {
            proportions: vec![0.5, 0.5],
            means: DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]),
            variances: vec![1.0, 1.0],
        };
        let e = e_step(&b, &p).unwrap();
        assert_abs_diff_eq!(e.responsibilities.matrix()[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(e.responsibilities.matrix()[(0, 1)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn e_step_matches_direct_density_ratio() {
        let b = random_matrix(5, 3, 8);
        let p = MixtureParams {
            proportions: vec![0.2, 0.5, 0.3],
            means: random_matrix(3, 3, 9),
            variances: vec![0.7, 1.3, 2.1],
        };
        let e = e_step(&b, &p).unwrap();
        for i in 0..5 {
            let dens: Vec<f64> = (0..3)
                .map(|k| {
                    let mut f = p.proportions[k];
                    for j in 0..3 {
                        let v = p.variances[j];
                        let r = b[(i, j)] - p.means[(k, j)];
                        f *= (-0.5 * r * r / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                    }
                    f
                })
                .collect();
            let total: f64 = dens.iter().sum();
            for k in 0..3 {
                assert_abs_diff_eq!(e.responsibilities.matrix()[(i, k)], dens[k] / total, epsilon = 1e-12);
            }
        }
        let rows_ok = e.responsibilities.matrix().row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-10);
        assert!(rows_ok);
        assert_abs_diff_eq!(e.proportions.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn variances_single_cluster_mle() {
        let b = random_matrix(20, 2, 3);
        let tau = DMatrix::from_element(20, 1, 1.0);
        let mu = unpenalized_means(&b, &tau).unwrap();
        let (v, floored) = update_variances(&b, &tau, &mu);
        assert!(floored.is_empty());
        for j in 0..2 {
            let col = b.column(j);
            let mean = col.mean();
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 20.0;
            assert_abs_diff_eq!(v[j], var, epsilon = 1e-12);
        }
    }

    #[test]
    fn variances_one_hot_pooled() {
        let b = DMatrix::from_row_slice(4, 1, &[1.0, 3.0, 10.0, 14.0]);
        let tau = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let mu = unpenalized_means(&b, &tau).unwrap();
        assert_eq!(mu, DMatrix::from_row_slice(2, 1, &[2.0, 12.0]));
        let (v, _) = update_variances(&b, &tau, &mu);
        assert_abs_diff_eq!(v[0], (1.0 + 1.0 + 4.0 + 4.0) / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_variance_floored() {
        let b = DMatrix::from_element(5, 2, 3.0);
        let tau = DMatrix::from_element(5, 1, 1.0);
        let mu = DMatrix::from_element(1, 2, 3.0);
        let (v, floored) = update_variances(&b, &tau, &mu);
        assert_eq!(v, vec![VARIANCE_FLOOR; 2]);
        assert_eq!(floored, vec![0, 1]);
    }

    #[test]
    fn empty_cluster_is_reported() {
        let b = random_matrix(4, 2, 1);
        let tau = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(unpenalized_means(&b, &tau), Err(Error::EmptyCluster(1))));
    }

    #[test]
    fn unpenalized_means_hand_computed() {
        let b = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0, -2.0, 4.0]);
        let tau = DMatrix::from_row_slice(4, 2, &[0.25, 0.75, 0.5, 0.5, 1.0, 0.0, 0.1, 0.9]);
        let mu = unpenalized_means(&b, &tau).unwrap();
        let t0 = 0.25 + 0.5 + 1.0 + 0.1;
        let t1 = 0.75 + 0.5 + 0.0 + 0.9;
        assert_abs_diff_eq!(mu[(0, 0)], (0.25 * 1.0 + 0.5 * 3.0 + 0.5 - 0.2) / t0, epsilon = 1e-12);
        assert_abs_diff_eq!(mu[(1, 1)], (0.75 * 2.0 - 0.5 + 0.0 + 3.6) / t1, epsilon = 1e-12);
    }

    #[test]
    fn objective_single_gaussian() {
        let x = random_matrix(12, 2, 6);
        let b = CoefficientMatrix::from_matrix(x.clone(), 1).unwrap();
        let p = MixtureParams {
            proportions: vec![1.0],
            means: DMatrix::from_row_slice(1, 2, &[0.1, -0.2]),
            variances: vec![0.8, 1.7],
        };
        let tau = Responsibilities(DMatrix::from_element(12, 1, 1.0));
        let obj = penalized_nll(&b, &p, &PenaltySpec::none(), &tau).unwrap();
        let mut expect = 0.0;
        for i in 0..12 {
            for j in 0..2 {
                let v = p.variances[j];
                expect += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + 0.5 * (x[(i, j)] - p.means[(0, j)]).powi(2) / v;
            }
        }
        assert_abs_diff_eq!(obj.observed, expect, epsilon = 1e-10);
        assert_abs_diff_eq!(obj.complete, expect, epsilon = 1e-10);
    }

    #[test]
    fn objective_translation_invariant() {
        let x = random_matrix(6, 2, 10);
        let shift = [1.5, -0.7];
        let shifted = DMatrix::from_fn(6, 2, |i, j| x[(i, j)] + shift[j]);
        let p = MixtureParams {
            proportions: vec![0.4, 0.6],
            means: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.5, 0.3]),
            variances: vec![0.9, 1.1],
        };
        let mut ps = p.clone();
        for k in 0..2 {
            for j in 0..2 {
                ps.means[(k, j)] += shift[j];
            }
        }
        let tau = Responsibilities(DMatrix::from_element(6, 2, 0.5));
        let a = penalized_nll(&CoefficientMatrix::from_matrix(x, 1).unwrap(), &p, &PenaltySpec::none(), &tau).unwrap();
        let b = penalized_nll(&CoefficientMatrix::from_matrix(shifted, 1).unwrap(), &ps, &PenaltySpec::none(), &tau)
            .unwrap();
        assert_abs_diff_eq!(a.observed, b.observed, epsilon = 1e-10);
        assert_abs_diff_eq!(a.complete, b.complete, epsilon = 1e-10);
    }

    #[test]
    fn single_cluster_em_is_mle_after_one_iteration() {
        let b = CoefficientMatrix::from_matrix(random_matrix(25, 3, 12), 1).unwrap();
        let fit = run_em(&b, 1, &PenaltySpec::none(), 1, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
        for j in 0..3 {
            let col = b.scores().column(j);
            assert_abs_diff_eq!(fit.params.means[(0, j)], col.mean(), epsilon = 1e-12);
        }
    }

    #[test]
    fn hard_labels_tie_lowest_index() {
        let r = Responsibilities(DMatrix::from_row_slice(2, 3, &[0.4, 0.4, 0.2, 0.1, 0.45, 0.45]));
        assert_eq!(r.hard_labels(), vec![0, 1]);
    }

    #[test]
    fn group_penalty_removes_noise_sensors() {
        // sensor 0 separates two clusters, sensors 1 and 2 are pure noise
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 120;
        let q_c = 2;
        let x = DMatrix::from_fn(n, 3 * q_c, |i, j| {
            let z: f64 = rng.sample(StandardNormal);
            if j < q_c {
                z + if i % 2 == 0 { 3.0 } else { -3.0 }
            } else {
                z
            }
        });
        let b = CoefficientMatrix::from_matrix(x, q_c).unwrap();
        let spec = PenaltySpec::unit(PenaltyKind::Group, 30.0).unwrap();
        let fit = run_em(&b, 2, &spec, 4, &EmOptions::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.removed_sensors, vec![1, 2]);
        assert!(fit.max_objective_increase() <= 1e-8);
    }

    #[test]
    fn deterministic_given_seed() {
        let b = two_clouds(30, 4, 2.0, 33);
        let spec = PenaltySpec::unit(PenaltyKind::Individual, 2.0).unwrap();
        let a = run_em(&b, 3, &spec, 17, &EmOptions::default()).unwrap();
        let c = run_em(&b, 3, &spec, 17, &EmOptions::default()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_mask_consistent() {
        let b = two_clouds(30, 4, 2.0, 34);
        let spec = PenaltySpec::unit(PenaltyKind::Individual, 5.0).unwrap();
        let fit = run_em(&b, 2, &spec, 1, &EmOptions::default()).unwrap();
        let mask = fit.params.zero_mask();
        for (z, v) in mask.iter().zip(fit.params.means.iter()) {
            assert_eq!(*z, *v == 0.0);
        }
        assert_eq!(fit.n_zero_means, mask.iter().filter(|&&z| z).count());
    }
}
