//! Adjusted BIC, the two-phase adaptive fit, and the grid search over the
//! number of clusters, λ and γ.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{self, EmOptions, FitResult, MixtureParams, PenaltyKind, PenaltySpec};
use crate::error::{Error, Result};
use crate::fpca::CoefficientMatrix;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchGrid {
    pub m_values: Vec<usize>,
    pub gamma_values: Vec<f64>,
    /// λ grid is these multipliers times `n^{1/3}`.
    pub lambda_multipliers: Vec<f64>,
    pub kinds: Vec<PenaltyKind>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            m_values: (1..=6).collect(),
            gamma_values: vec![0.5, 1.0, 1.5, 2.0],
            lambda_multipliers: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0],
            kinds: vec![PenaltyKind::Group],
        }
    }
}

impl SearchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.m_values.is_empty() || self.m_values.contains(&0) {
            return Err(Error::InvalidArgument("m grid must be nonempty and positive".into()));
        }
        if self.lambda_multipliers.is_empty() || self.lambda_multipliers.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("λ multipliers must be nonempty, finite and >= 0".into()));
        }
        if self.gamma_values.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument("γ values must be finite and > 0".into()));
        }
        Ok(())
    }

    /// `(multiplier, λ)` pairs for `n` observations.
    pub fn lambdas(&self, n: usize) -> Vec<(f64, f64)> {
        let scale = (n as f64).cbrt();
        self.lambda_multipliers.iter().map(|&c| (c, c * scale)).collect()
    }
}

/// `d_e = m + q + mq − n_0 − 1`.
pub fn degrees_of_freedom(m: usize, q: usize, n_zero: usize) -> f64 {
    (m + q + m * q) as f64 - n_zero as f64 - 1.0
}

/// `2·NLL + log(nq)·d_e` with the unpenalized observed-data NLL at the fit.
pub fn adjusted_bic(fit: &FitResult, n: usize, q: usize) -> f64 {
    2.0 * fit.plain_nll + ((n * q) as f64).ln() * degrees_of_freedom(fit.params.m(), q, fit.n_zero_means)
}

/// Settings shared by every grid point of a search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub seed: u64,
    pub em: EmOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            em: EmOptions::default(),
        }
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub kind: PenaltyKind,
    pub m: usize,
    pub lambda_multiplier: f64,
    pub lambda: f64,
    /// 0 for the unit-weight pilot fits.
    pub gamma: f64,
    pub phase: u8,
    pub bic: Option<f64>,
    pub n_zero: usize,
    pub removed_sensors: usize,
    pub converged: bool,
    pub iterations: usize,
    pub max_objective_increase: f64,
    pub error: Option<String>,
}

impl SelectionRow {
    fn eligible(&self) -> bool {
        self.converged && self.bic.is_some_and(f64::is_finite)
    }
}

/// The hyper-parameters of the selected model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chosen {
    pub kind: PenaltyKind,
    pub m: usize,
    pub lambda: f64,
    pub lambda_multiplier: f64,
    pub gamma: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub kind: PenaltyKind,
    pub chosen: Chosen,
    pub best: FitResult,
    pub rows: Vec<SelectionRow>,
    /// Pilot means per `m`.
    pub pilot_means: Vec<(usize, DMatrix<f64>)>,
}

impl SelectionReport {
    pub fn removed_sensors(&self) -> &[usize] {
        &self.best.removed_sensors
    }
}

/// Total order used to pick the best row: BIC, then m, λ, γ.
fn row_order(a: &SelectionRow, b: &SelectionRow) -> Ordering {
    let bic = |r: &SelectionRow| r.bic.unwrap_or(f64::INFINITY);
    bic(a)
        .total_cmp(&bic(b))
        .then(a.m.cmp(&b.m))
        .then(a.lambda.total_cmp(&b.lambda))
        .then(a.gamma.total_cmp(&b.gamma))
        .then(a.phase.cmp(&b.phase))
}

struct Evaluated {
    row: SelectionRow,
    fit: Option<FitResult>,
}

fn evaluate(
    b: &CoefficientMatrix,
    init: &MixtureParams,
    spec: &PenaltySpec,
    multiplier: f64,
    phase: u8,
    seed: u64,
    options: &EmOptions,
) -> Evaluated {
    let mut row = SelectionRow {
        kind: spec.kind,
        m: init.m(),
        lambda_multiplier: multiplier,
        lambda: spec.lambda,
        gamma: spec.gamma,
        phase,
        bic: None,
        n_zero: 0,
        removed_sensors: 0,
        converged: false,
        iterations: 0,
        max_objective_increase: 0.0,
        error: None,
    };
    match em::run_em_from(b, init, spec, seed, options) {
        Ok(fit) => {
            row.bic = Some(adjusted_bic(&fit, b.n(), b.q()));
            row.n_zero = fit.n_zero_means;
            row.removed_sensors = fit.removed_sensors.len();
            row.converged = fit.converged;
            row.iterations = fit.iterations;
            row.max_objective_increase = fit.max_objective_increase();
            Evaluated { row, fit: Some(fit) }
        }
        Err(e) => {
            log::warn!(
                "grid point m={} λ={} γ={} failed: {e}",
                row.m,
                row.lambda,
                row.gamma
            );
            row.error = Some(e.to_string());
            Evaluated { row, fit: None }
        }
    }
}

fn best_of(points: &[Evaluated]) -> Option<&Evaluated> {
    points
        .iter()
        .filter(|p| p.row.eligible())
        .min_by(|a, b| row_order(&a.row, &b.row))
}

/// Pilot fits across the λ grid with unit weights.
fn phase_one(
    b: &CoefficientMatrix,
    init: &MixtureParams,
    kind: PenaltyKind,
    lambdas: &[(f64, f64)],
    options: &SearchOptions,
) -> Result<Vec<Evaluated>> {
    let seed = derive_seed(options.seed, init.m() as u64);
    lambdas
        .par_iter()
        .map(|&(c, lambda)| {
            let spec = PenaltySpec::unit(kind, lambda)?;
            Ok(evaluate(b, init, &spec, c, 1, seed, &options.em))
        })
        .collect()
}

/// Adaptive-weight refits across the λ grid for one γ. The λ = 0 point is
/// the same model as the pilot λ = 0 fit and is copied from `pilot`.
fn phase_two(
    b: &CoefficientMatrix,
    init: &MixtureParams,
    kind: PenaltyKind,
    gamma: f64,
    reference: &DMatrix<f64>,
    lambdas: &[(f64, f64)],
    pilot: &[Evaluated],
    options: &SearchOptions,
) -> Result<Vec<Evaluated>> {
    let seed = derive_seed(options.seed, init.m() as u64);
    lambdas
        .par_iter()
        .map(|&(c, lambda)| {
            if lambda == 0.0 {
                if let Some(p) = pilot.iter().find(|p| p.row.lambda == 0.0) {
                    let mut row = p.row.clone();
                    row.gamma = gamma;
                    row.phase = 2;
                    let fit = p.fit.clone().map(|mut f| {
                        f.gamma = gamma;
                        f
                    });
                    return Ok(Evaluated { row, fit });
                }
            }
            let spec = PenaltySpec::adaptive(kind, lambda, gamma, reference)?;
            Ok(evaluate(b, init, &spec, c, 2, seed, &options.em))
        })
        .collect()
}

/// Result of [`two_phase_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhaseFit {
    pub best: FitResult,
    pub pilot_means: DMatrix<f64>,
    pub rows: Vec<SelectionRow>,
}

fn pilot_reference(pilot: &[Evaluated], m: usize) -> Result<&FitResult> {
    best_of(pilot).and_then(|p| p.fit.as_ref()).ok_or_else(|| {
        Error::AllGridPointsFailed(
            pilot
                .iter()
                .map(|p| format!("m={m} λ={}: {}", p.row.lambda, failure_reason(&p.row)))
                .collect(),
        )
    })
}

fn failure_reason(row: &SelectionRow) -> String {
    match &row.error {
        Some(e) => e.clone(),
        None if !row.converged => "did not converge".into(),
        None => "non-finite BIC".into(),
    }
}

/// Pilot fit over the λ grid with unit weights, then adaptive refits with
/// weights from the best pilot means. Returns the best refit.
pub fn two_phase_fit(
    b: &CoefficientMatrix,
    m: usize,
    kind: PenaltyKind,
    gamma: f64,
    grid: &SearchGrid,
    options: &SearchOptions,
) -> Result<TwoPhaseFit> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
    }
    let init = em::initialize(b, m, derive_seed(options.seed, m as u64))?;
    let lambdas = grid.lambdas(b.n());
    let pilot = phase_one(b, &init, kind, &lambdas, options)?;
    let reference = pilot_reference(&pilot, m)?.params.means.clone();
    let refits = phase_two(b, &init, kind, gamma, &reference, &lambdas, &pilot, options)?;
    let best = best_of(&refits)
        .and_then(|p| p.fit.clone())
        .ok_or_else(|| Error::AllGridPointsFailed(refits.iter().map(|p| failure_reason(&p.row)).collect()))?;
    Ok(TwoPhaseFit {
        best,
        pilot_means: reference,
        rows: refits.into_iter().map(|p| p.row).collect(),
    })
}

struct PerM {
    points: Vec<Evaluated>,
    pilot_means: Option<DMatrix<f64>>,
    failure: Option<String>,
}

fn search_one_m(b: &CoefficientMatrix, m: usize, kind: PenaltyKind, grid: &SearchGrid, options: &SearchOptions) -> PerM {
    let init = match em::initialize(b, m, derive_seed(options.seed, m as u64)) {
        Ok(init) => init,
        Err(e) => {
            log::warn!("initialization failed for m={m}: {e}");
            return PerM {
                points: Vec::new(),
                pilot_means: None,
                failure: Some(format!("m={m}: {e}")),
            };
        }
    };
    let lambdas = if kind == PenaltyKind::None {
        vec![(0.0, 0.0)]
    } else {
        grid.lambdas(b.n())
    };
    let run = || -> Result<(Vec<Evaluated>, Option<DMatrix<f64>>)> {
        let mut pilot = phase_one(b, &init, kind, &lambdas, options)?;
        if kind == PenaltyKind::None {
            return Ok((pilot, None));
        }
        let reference = pilot_reference(&pilot, m)?.params.means.clone();
        let refits: Vec<Vec<Evaluated>> = grid
            .gamma_values
            .par_iter()
            .map(|&g| phase_two(b, &init, kind, g, &reference, &lambdas, &pilot, options))
            .collect::<Result<_>>()?;
        pilot.extend(refits.into_iter().flatten());
        Ok((pilot, Some(reference)))
    };
    match run() {
        Ok((points, pilot_means)) => PerM {
            points,
            pilot_means,
            failure: None,
        },
        Err(e) => PerM {
            points: Vec::new(),
            pilot_means: None,
            failure: Some(format!("m={m}: {e}")),
        },
    }
}

/// Full search for one penalty kind: every `m`, the pilot λ grid, and the
/// adaptive refits for every γ. Kind `none` fits only λ = 0.
pub fn model_search(
    b: &CoefficientMatrix,
    grid: &SearchGrid,
    kind: PenaltyKind,
    options: &SearchOptions,
) -> Result<SelectionReport> {
    grid.validate()?;
    let mut m_values = grid.m_values.clone();
    m_values.sort_unstable();
    m_values.dedup();
    let per_m: Vec<PerM> = m_values
        .par_iter()
        .map(|&m| search_one_m(b, m, kind, grid, options))
        .collect();

    let mut failures: Vec<String> = per_m.iter().filter_map(|p| p.failure.clone()).collect();
    let best = per_m
        .iter()
        .flat_map(|p| p.points.iter())
        .filter(|p| p.row.eligible())
        .min_by(|a, b| row_order(&a.row, &b.row));
    let Some(best) = best else {
        failures.extend(
            per_m
                .iter()
                .flat_map(|p| p.points.iter())
                .map(|p| format!("m={} λ={} γ={}: {}", p.row.m, p.row.lambda, p.row.gamma, failure_reason(&p.row))),
        );
        return Err(Error::AllGridPointsFailed(failures));
    };
    let fit = best.fit.clone().expect("eligible rows carry a fit");
    let chosen = Chosen {
        kind,
        m: best.row.m,
        lambda: best.row.lambda,
        lambda_multiplier: best.row.lambda_multiplier,
        gamma: best.row.gamma,
        bic: best.row.bic.unwrap_or(f64::NAN),
    };
    let pilot_means = m_values
        .iter()
        .zip(&per_m)
        .filter_map(|(&m, p)| p.pilot_means.clone().map(|mu| (m, mu)))
        .collect();
    let rows = per_m.into_iter().flat_map(|p| p.points.into_iter().map(|e| e.row)).collect();
    Ok(SelectionReport {
        kind,
        chosen,
        best: fit,
        rows,
        pilot_means,
    })
}

/// [`model_search`] for every kind in the grid.
pub fn search_all(b: &CoefficientMatrix, grid: &SearchGrid, options: &SearchOptions) -> Result<Vec<SelectionReport>> {
    grid.kinds.iter().map(|&k| model_search(b, grid, k, options)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn clustered(n: usize, p: usize, q_c: usize, m: usize, signal: usize, gap: f64, seed: u64) -> CoefficientMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres: Vec<f64> = (0..m).map(|k| gap * (k as f64 - (m as f64 - 1.0) / 2.0)).collect();
        let x = DMatrix::from_fn(n, p * q_c, |i, j| {
            let z: f64 = rng.sample(StandardNormal);
            if j < signal * q_c {
                z + centres[i % m] * if j % 2 == 0 { 1.0 } else { -1.0 }
            } else {
                z
            }
        });
        CoefficientMatrix::from_matrix(x, q_c).unwrap()
    }

    fn fit_with(m: usize, n_zero: usize, plain_nll: f64) -> FitResult {
        let b = CoefficientMatrix::from_matrix(DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64), 1).unwrap();
        let mut fit = em::run_em(&b, 1, &PenaltySpec::none(), 0, &EmOptions::default()).unwrap();
        if m > 1 {
            fit.params.means = DMatrix::zeros(m, 4);
            fit.params.proportions = vec![1.0 / m as f64; m];
        }
        fit.n_zero_means = n_zero;
        fit.plain_nll = plain_nll;
        fit
    }

    #[test]
    fn degrees_of_freedom_arithmetic() {
        assert_eq!(degrees_of_freedom(1, 4, 0), 8.0);
        assert_eq!(degrees_of_freedom(1, 4, 3), 5.0);
        assert_eq!(degrees_of_freedom(3, 54, 10), 3.0 + 54.0 + 162.0 - 10.0 - 1.0);
    }

    #[test]
    fn bic_drops_by_log_nq_per_zero() {
        let a = adjusted_bic(&fit_with(1, 0, 10.0), 50, 4);
        let b = adjusted_bic(&fit_with(1, 3, 10.0), 50, 4);
        assert_abs_diff_eq!(a - b, 3.0 * (200f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(a, 20.0 + 200f64.ln() * 8.0, epsilon = 1e-12);
    }

    #[test]
    fn default_grid_values() {
        let g = SearchGrid::default();
        assert_eq!(g.m_values, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(g.gamma_values, vec![0.5, 1.0, 1.5, 2.0]);
        let l = g.lambdas(125);
        assert_eq!(l.len(), 10);
        assert_abs_diff_eq!(l[9].1, 100.0, epsilon = 1e-9);
        assert_eq!(l[0].1, 0.0);
    }

    #[test]
    fn bic_invariant_under_relabeling() {
        let b = clustered(90, 2, 2, 3, 1, 4.0, 3);
        let spec = PenaltySpec::unit(PenaltyKind::Group, 3.0).unwrap();
        let fit = em::run_em(&b, 3, &spec, 5, &EmOptions::default()).unwrap();
        let perm = [2, 0, 1];
        let params = fit.params.permuted(&perm);
        let refit = em::run_em_from(&b, &params, &spec, 5, &EmOptions { max_iter: 0, ..Default::default() }).unwrap();
        let mut original = fit.clone();
        original.plain_nll = em::observed_nll(b.scores(), &fit.params);
        assert_abs_diff_eq!(
            adjusted_bic(&original, b.n(), b.q()),
            adjusted_bic(&refit, b.n(), b.q()),
            epsilon = 1e-8
        );
    }

    #[test]
    fn singleton_m_grid() {
        let b = clustered(90, 3, 2, 3, 1, 5.0, 11);
        let grid = SearchGrid {
            m_values: vec![3],
            gamma_values: vec![1.0],
            ..Default::default()
        };
        let r = model_search(&b, &grid, PenaltyKind::Group, &SearchOptions::default()).unwrap();
        assert_eq!(r.chosen.m, 3);
        assert!(r.rows.iter().all(|row| row.m == 3));
    }

    #[test]
    fn recovers_cluster_count_and_noise_sensors() {
        let b = clustered(150, 4, 2, 3, 1, 4.0, 12);
        let grid = SearchGrid {
            m_values: vec![1, 2, 3, 4],
            gamma_values: vec![1.0],
            ..Default::default()
        };
        let r = model_search(&b, &grid, PenaltyKind::Group, &SearchOptions::default()).unwrap();
        assert_eq!(r.chosen.m, 3);
        assert_eq!(r.removed_sensors(), &[1, 2, 3]);
    }

    #[test]
    fn lambda_zero_only_equals_unpenalized() {
        let b = clustered(60, 2, 2, 2, 1, 4.0, 13);
        let grid = SearchGrid {
            m_values: vec![2],
            lambda_multipliers: vec![0.0],
            ..Default::default()
        };
        let r = model_search(&b, &grid, PenaltyKind::Individual, &SearchOptions::default()).unwrap();
        let plain = model_search(&b, &grid, PenaltyKind::None, &SearchOptions::default()).unwrap();
        assert_eq!(r.best.params, plain.best.params);
        let two = two_phase_fit(&b, 2, PenaltyKind::Individual, 1.0, &grid, &SearchOptions::default()).unwrap();
        assert_eq!(two.best.params, plain.best.params);
    }

    #[test]
    fn tiny_pilot_component_zeroed_in_refit() {
        let b = clustered(80, 2, 2, 2, 1, 4.0, 14);
        let mut reference = DMatrix::from_element(2, 4, 1.0);
        reference[(0, 3)] = 1e-6;
        let spec = PenaltySpec::adaptive(PenaltyKind::Individual, 0.5 * 80f64.cbrt(), 1.0, &reference).unwrap();
        assert!(spec.entry_weight(0, 3) >= 1e6);
        let fit = em::run_em(&b, 2, &spec, 1, &EmOptions::default()).unwrap();
        assert_eq!(fit.params.means[(0, 3)], 0.0);
    }

    #[test]
    fn gamma_zero_weights_reproduce_pilot() {
        let b = clustered(60, 2, 2, 2, 1, 3.0, 15);
        let init = em::initialize(&b, 2, 3).unwrap();
        let reference = DMatrix::from_fn(2, 4, |k, j| (k as f64 - 0.5) * j as f64);
        let unit = PenaltySpec::unit(PenaltyKind::Group, 4.0).unwrap();
        let adaptive = PenaltySpec::adaptive(PenaltyKind::Group, 4.0, 0.0, &reference).unwrap();
        let a = em::run_em_from(&b, &init, &unit, 1, &EmOptions::default()).unwrap();
        let c = em::run_em_from(&b, &init, &adaptive, 1, &EmOptions::default()).unwrap();
        assert_eq!(a.params, c.params);
    }

    #[test]
    fn deterministic_and_order_independent() {
        let b = clustered(60, 2, 2, 2, 1, 3.0, 16);
        let grid = SearchGrid {
            m_values: vec![1, 2, 3],
            gamma_values: vec![0.5, 1.0],
            ..Default::default()
        };
        let mut reversed = grid.clone();
        reversed.m_values.reverse();
        reversed.gamma_values.reverse();
        let opts = SearchOptions::default();
        let a = model_search(&b, &grid, PenaltyKind::Variable, &opts).unwrap();
        let c = model_search(&b, &grid, PenaltyKind::Variable, &opts).unwrap();
        let d = model_search(&b, &reversed, PenaltyKind::Variable, &opts).unwrap();
        assert_eq!(a.rows, c.rows);
        assert_eq!(a.chosen, d.chosen);
        assert_eq!(a.best.params, d.best.params);
    }

    #[test]
    fn invalid_grid_rejected() {
        let b = clustered(20, 1, 1, 2, 1, 3.0, 1);
        let grid = SearchGrid {
            m_values: vec![],
            ..Default::default()
        };
        assert!(matches!(
            model_search(&b, &grid, PenaltyKind::Group, &SearchOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }
}
