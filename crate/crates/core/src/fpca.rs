//! Per-sensor functional principal component analysis.
//!
//! Every curve is projected onto the common B-spline basis; the eigenproblem
//! is solved on the coefficient covariance whitened by the Gram matrix so
//! eigenfunctions are orthonormal in L2 over the domain. Scores of all
//! sensors are then stacked sensor-major into the coefficient matrix that the
//! mixture model clusters.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{gram_matrix, BasisSpec, SplineProjector};
use crate::error::{Error, Result};

/// n observations × p sensors × τ time points on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataSet {
    n: usize,
    p: usize,
    times: Vec<f64>,
    // index: (obs * p + sensor) * tau + t
    values: Vec<f64>,
    sensor_names: Vec<String>,
    obs_ids: Vec<String>,
    labels: Option<Vec<usize>>,
}

impl FunctionalDataSet {
    /// `values` is laid out observation-major, then sensor, then time.
    pub fn new(
        times: Vec<f64>,
        values: Vec<f64>,
        obs_ids: Vec<String>,
        sensor_names: Vec<String>,
    ) -> Result<Self> {
        let n = obs_ids.len();
        let p = sensor_names.len();
        let tau = times.len();
        if n == 0 || p == 0 || tau == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty dataset (n={n}, p={p}, tau={tau})"
            )));
        }
        if values.len() != n * p * tau {
            return Err(Error::ShapeMismatch(format!(
                "{} values for n={n}, p={p}, tau={tau}",
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("time grid must be finite and strictly increasing".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let obs = pos / (p * tau);
            let sensor = (pos / tau) % p;
            return Err(Error::InvalidArgument(format!(
                "non-finite value for obs `{}`, sensor `{}`",
                obs_ids[obs], sensor_names[sensor]
            )));
        }
        Ok(Self {
            n,
            p,
            times,
            values,
            sensor_names,
            obs_ids,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} observations",
                labels.len(),
                self.n
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn tau(&self) -> usize {
        self.times.len()
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn sensor_names(&self) -> &[String] {
        &self.sensor_names
    }
    pub fn obs_ids(&self) -> &[String] {
        &self.obs_ids
    }
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn curve(&self, obs: usize, sensor: usize) -> &[f64] {
        let tau = self.tau();
        let start = (obs * self.p + sensor) * tau;
        &self.values[start..start + tau]
    }

    fn curve_mut(&mut self, obs: usize, sensor: usize) -> &mut [f64] {
        let tau = self.tau();
        let start = (obs * self.p + sensor) * tau;
        &mut self.values[start..start + tau]
    }

    /// Copy of the dataset with observation order permuted for one sensor only.
    pub fn permute_sensor_observations(&self, sensor: usize, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n || sensor >= self.p {
            return Err(Error::ShapeMismatch("permutation does not match dataset".into()));
        }
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.curve_mut(dst, sensor).copy_from_slice(self.curve(src, sensor));
        }
        Ok(out)
    }
}

/// Pooled per-sensor location and scale used to standardize raw curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Default for Standardization {
    fn default() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }
}

impl Standardization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }
    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Rescales every sensor to pooled mean 0 and variance 1 over all curves and
/// time points. The divisor of the variance is the pooled sample count.
pub fn standardize(data: &FunctionalDataSet) -> Result<(FunctionalDataSet, Vec<Standardization>)> {
    let mut out = data.clone();
    let mut stats = Vec::with_capacity(data.p);
    let count = (data.n * data.tau()) as f64;
    for s in 0..data.p {
        let mean = (0..data.n).flat_map(|i| data.curve(i, s)).sum::<f64>() / count;
        let var = (0..data.n)
            .flat_map(|i| data.curve(i, s))
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / count;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::ZeroVariance(data.sensor_names[s].clone()));
        }
        let st = Standardization { mean, sd };
        for i in 0..data.n {
            for x in out.curve_mut(i, s) {
                *x = st.apply(*x);
            }
        }
        stats.push(st);
    }
    Ok((out, stats))
}

/// Quantities shared by every sensor fit on the same basis and grid.
#[derive(Debug, Clone)]
pub struct FpcaContext {
    basis: BasisSpec,
    gram: DMatrix<f64>,
    // lower Cholesky factor of the Gram matrix
    chol_l: DMatrix<f64>,
    projector: SplineProjector,
}

impl FpcaContext {
    pub fn new(basis: &BasisSpec, times: &[f64]) -> Result<Self> {
        let gram = gram_matrix(basis)?;
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Gram matrix is not positive definite".into()))?;
        Ok(Self {
            basis: basis.clone(),
            gram,
            chol_l: chol.l(),
            projector: SplineProjector::new(basis, times)?,
        })
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    fn check_grid(&self, times: &[f64]) -> Result<()> {
        let own = self.projector.times();
        if own.len() != times.len() || own.iter().zip(times).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::GridMismatch(format!(
                "model grid has {} points, data grid has {}",
                own.len(),
                times.len()
            )));
        }
        Ok(())
    }

    /// n × n_basis matrix of spline coefficients for one sensor.
    fn sensor_coefficients(&self, data: &FunctionalDataSet, sensor: usize) -> Result<DMatrix<f64>> {
        let nb = self.basis.n_basis;
        let mut c = DMatrix::zeros(data.n(), nb);
        for i in 0..data.n() {
            let coeffs = self.projector.project(data.curve(i, sensor))?;
            for (b, v) in coeffs.into_iter().enumerate() {
                c[(i, b)] = v;
            }
        }
        Ok(c)
    }

    /// Fits the FPCA of one sensor keeping `q_c` components.
    pub fn fit_sensor(&self, data: &FunctionalDataSet, sensor: usize, q_c: usize) -> Result<SensorFpcaModel> {
        self.check_grid(data.times())?;
        if sensor >= data.p() {
            return Err(Error::UnknownSensor(sensor));
        }
        let max_qc = (data.n().saturating_sub(1)).min(self.basis.n_basis);
        if q_c < 1 || q_c > max_qc {
            return Err(Error::InvalidArgument(format!(
                "q_c = {q_c} outside [1, {max_qc}] for n = {}, n_basis = {}",
                data.n(),
                self.basis.n_basis
            )));
        }
        let n = data.n() as f64;
        let nb = self.basis.n_basis;
        let coeffs = self.sensor_coefficients(data, sensor)?;
        let mean = coeffs.row_mean();
        let mut centered = coeffs;
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        // whitened covariance L' S L with S = C'C / n
        let cl = &centered * &self.chol_l;
        let whitened = (cl.transpose() * &cl) / n;
        let total_variance = whitened.trace().max(0.0);
        let eig = whitened.symmetric_eigen();
        let mut order: Vec<usize> = (0..nb).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

        let spectrum: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let lt = self.chol_l.transpose();
        let mut eigen_coeffs = Vec::with_capacity(q_c);
        for &k in order.iter().take(q_c) {
            let u = eig.eigenvectors.column(k).into_owned();
            // e = L^{-T} u so that e' G e = u'u = 1
            let e = lt
                .solve_upper_triangular(&u)
                .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
            let mut e: Vec<f64> = e.iter().copied().collect();
            let lead = e
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (idx, v)| if v.abs() > best.1 { (idx, v.abs()) } else { best })
                .0;
            if e[lead] < 0.0 {
                e.iter_mut().for_each(|v| *v = -*v);
            }
            eigen_coeffs.push(e);
        }
        Ok(SensorFpcaModel {
            sensor,
            sensor_name: data.sensor_names()[sensor].clone(),
            basis: self.basis.clone(),
            times: data.times().to_vec(),
            mean_coeffs: mean.iter().copied().collect(),
            eigen_coeffs,
            spectrum,
            total_variance,
            standardization: Standardization::default(),
        })
    }

    /// Scores of one curve (already on the model's scale).
    pub fn scores(&self, model: &SensorFpcaModel, curve: &[f64]) -> Result<Vec<f64>> {
        if curve.len() != self.projector.times().len() {
            return Err(Error::GridMismatch(format!(
                "curve has {} samples, grid has {}",
                curve.len(),
                self.projector.times().len()
            )));
        }
        let coeffs = self.projector.project(curve)?;
        Ok(model.scores_from_coefficients(&coeffs, &self.gram))
    }
}

/// Fitted FPCA of one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFpcaModel {
    pub sensor: usize,
    pub sensor_name: String,
    pub basis: BasisSpec,
    pub times: Vec<f64>,
    pub mean_coeffs: Vec<f64>,
    /// One spline-coefficient vector per retained eigenfunction.
    pub eigen_coeffs: Vec<Vec<f64>>,
    /// Full eigenvalue spectrum, nonincreasing and clipped at zero.
    pub spectrum: Vec<f64>,
    pub total_variance: f64,
    pub standardization: Standardization,
}

impl SensorFpcaModel {
    pub fn q_c(&self) -> usize {
        self.eigen_coeffs.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.spectrum[..self.q_c()]
    }

    /// Cumulative fraction of variance explained by the first l components,
    /// for l = 1..=n_basis. A sensor without variation counts as fully
    /// explained.
    pub fn variance_explained(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.spectrum
            .iter()
            .map(|v| {
                acc += v;
                if self.total_variance > 0.0 {
                    (acc / self.total_variance).min(1.0)
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Keeps only the leading `q_c` eigenfunctions.
    pub fn truncated(&self, q_c: usize) -> Result<Self> {
        if q_c < 1 || q_c > self.q_c() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate {} components to {q_c}",
                self.q_c()
            )));
        }
        let mut out = self.clone();
        out.eigen_coeffs.truncate(q_c);
        Ok(out)
    }

    pub(crate) fn scores_from_coefficients(&self, coeffs: &[f64], gram: &DMatrix<f64>) -> Vec<f64> {
        let centered = DVector::from_iterator(
            coeffs.len(),
            coeffs.iter().zip(&self.mean_coeffs).map(|(c, m)| c - m),
        );
        let gc = gram * centered;
        self.eigen_coeffs
            .iter()
            .map(|e| e.iter().zip(gc.iter()).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Spline coefficients of mean + Σ scores_l ξ_l.
    pub fn reconstruct_coefficients(&self, scores: &[f64]) -> Vec<f64> {
        let mut c = self.mean_coeffs.clone();
        for (s, e) in scores.iter().zip(&self.eigen_coeffs) {
            for (ci, ei) in c.iter_mut().zip(e) {
                *ci += s * ei;
            }
        }
        c
    }

    /// Curve values on the model grid reconstructed from scores.
    pub fn reconstruct(&self, scores: &[f64]) -> Result<Vec<f64>> {
        self.basis.evaluate_curve(&self.reconstruct_coefficients(scores), &self.times)
    }
}

/// FPCA of a single sensor.
pub fn fit_sensor_fpca(
    data: &FunctionalDataSet,
    sensor: usize,
    basis: &BasisSpec,
    q_c: usize,
) -> Result<SensorFpcaModel> {
    FpcaContext::new(basis, data.times())?.fit_sensor(data, sensor, q_c)
}

/// Scores of a curve sampled on the model grid, on the model's (standardized)
/// scale.
pub fn transform(model: &SensorFpcaModel, curve: &[f64]) -> Result<Vec<f64>> {
    if curve.len() != model.times.len() {
        return Err(Error::GridMismatch(format!(
            "curve has {} samples, model grid has {}",
            curve.len(),
            model.times.len()
        )));
    }
    FpcaContext::new(&model.basis, &model.times)?.scores(model, curve)
}

/// Outcome of the α/β rule for the number of components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSelection {
    pub q_c: usize,
    /// Fraction of sensors whose explained variance exceeds β at `q_c`.
    pub fraction: f64,
    /// False when no q_c up to the spectrum length met the rule.
    pub satisfied: bool,
}

/// Smallest q_c such that at least a fraction `alpha` of the sensors have
/// more than a fraction `beta` of their variation explained.
pub fn select_num_components(models: &[SensorFpcaModel], alpha: f64, beta: f64) -> Result<ComponentSelection> {
    if !(alpha > 0.0 && alpha <= 1.0) || !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < alpha <= 1 and 0 < beta < 1, got alpha={alpha}, beta={beta}"
        )));
    }
    if models.is_empty() {
        return Err(Error::InvalidArgument("no sensor models".into()));
    }
    let explained: Vec<Vec<f64>> = models.iter().map(|m| m.variance_explained()).collect();
    let max_q = explained.iter().map(Vec::len).min().unwrap_or(0);
    let fraction_at = |q: usize| {
        explained.iter().filter(|e| e[q - 1] > beta).count() as f64 / models.len() as f64
    };
    for q in 1..=max_q {
        let fraction = fraction_at(q);
        if fraction >= alpha {
            return Ok(ComponentSelection {
                q_c: q,
                fraction,
                satisfied: true,
            });
        }
    }
    log::warn!("no q_c <= {max_q} satisfies alpha={alpha}, beta={beta}");
    Ok(ComponentSelection {
        q_c: max_q,
        fraction: if max_q > 0 { fraction_at(max_q) } else { 0.0 },
        satisfied: false,
    })
}

/// n × q score matrix, sensor-major and component-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    scores: DMatrix<f64>,
    p: usize,
    q_c: usize,
    sensor_names: Vec<String>,
}

impl CoefficientMatrix {
    pub fn new(scores: DMatrix<f64>, p: usize, q_c: usize, sensor_names: Vec<String>) -> Result<Self> {
        if p == 0 || q_c == 0 || scores.ncols() != p * q_c || sensor_names.len() != p {
            return Err(Error::ShapeMismatch(format!(
                "{} columns and {} names for p={p}, q_c={q_c}",
                scores.ncols(),
                sensor_names.len()
            )));
        }
        if scores.nrows() == 0 {
            return Err(Error::ShapeMismatch("coefficient matrix has no rows".into()));
        }
        Ok(Self {
            scores,
            p,
            q_c,
            sensor_names,
        })
    }

    /// Each sensor contributes `q_c` adjacent columns, with generic names.
    pub fn from_matrix(scores: DMatrix<f64>, q_c: usize) -> Result<Self> {
        if q_c == 0 || scores.ncols() % q_c != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} columns are not a multiple of q_c={q_c}",
                scores.ncols()
            )));
        }
        let p = scores.ncols() / q_c;
        let names = (1..=p).map(|s| format!("s{s}")).collect();
        Self::new(scores, p, q_c, names)
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }
    pub fn n(&self) -> usize {
        self.scores.nrows()
    }
    pub fn q(&self) -> usize {
        self.scores.ncols()
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn q_c(&self) -> usize {
        self.q_c
    }
    pub fn sensor_names(&self) -> &[String] {
        &self.sensor_names
    }

    /// Column index of component `component` of sensor `sensor` (0-based).
    pub fn column(&self, sensor: usize, component: usize) -> usize {
        sensor * self.q_c + component
    }

    /// Inverse of [`Self::column`].
    pub fn sensor_component(&self, column: usize) -> (usize, usize) {
        (column / self.q_c, column % self.q_c)
    }

    /// Observation rows restricted to a subset, keeping sensor metadata.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let scores = self.scores.select_rows(rows.iter());
        Self {
            scores,
            p: self.p,
            q_c: self.q_c,
            sensor_names: self.sensor_names.clone(),
        }
    }
}

/// Stacks per-sensor n × q_c score blocks into the coefficient matrix.
pub fn assemble_coefficients(blocks: &[DMatrix<f64>], sensor_names: Vec<String>) -> Result<CoefficientMatrix> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no score blocks".into()))?;
    let (n, q_c) = first.shape();
    if let Some((s, b)) = blocks.iter().enumerate().find(|(_, b)| b.shape() != (n, q_c)) {
        return Err(Error::ShapeMismatch(format!(
            "block {s} has shape {:?}, expected ({n}, {q_c})",
            b.shape()
        )));
    }
    let p = blocks.len();
    let mut scores = DMatrix::zeros(n, p * q_c);
    for (s, b) in blocks.iter().enumerate() {
        scores.columns_mut(s * q_c, q_c).copy_from(b);
    }
    CoefficientMatrix::new(scores, p, q_c, sensor_names)
}

/// How the number of components per sensor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRule {
    Fixed(usize),
    Proportion { alpha: f64, beta: f64 },
}

impl Default for ComponentRule {
    fn default() -> Self {
        ComponentRule::Proportion { alpha: 0.8, beta: 0.8 }
    }
}

/// Everything needed to map raw curves to the coefficient matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaBundle {
    pub basis: BasisSpec,
    pub q_c: usize,
    pub selection: Option<ComponentSelection>,
    pub models: Vec<SensorFpcaModel>,
}

impl FpcaBundle {
    /// Standardizes raw data with the stored statistics and computes scores.
    pub fn transform_dataset(&self, data: &FunctionalDataSet) -> Result<CoefficientMatrix> {
        if data.p() != self.models.len() {
            return Err(Error::ShapeMismatch(format!(
                "dataset has {} sensors, model has {}",
                data.p(),
                self.models.len()
            )));
        }
        let ctx = FpcaContext::new(&self.basis, data.times())?;
        ctx.check_grid(&self.models[0].times)?;
        let blocks = self
            .models
            .iter()
            .enumerate()
            .map(|(s, model)| {
                let mut block = DMatrix::zeros(data.n(), self.q_c);
                let st = model.standardization;
                for i in 0..data.n() {
                    let curve: Vec<f64> = data.curve(i, s).iter().map(|&x| st.apply(x)).collect();
                    for (l, v) in ctx.scores(model, &curve)?.into_iter().enumerate() {
                        block[(i, l)] = v;
                    }
                }
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()?;
        assemble_coefficients(&blocks, data.sensor_names().to_vec())
    }
}

/// Full reduction: standardize, fit per-sensor FPCA (in parallel), choose
/// q_c, and score the training curves.
pub fn reduce_dataset(
    raw: &FunctionalDataSet,
    basis: &BasisSpec,
    rule: ComponentRule,
) -> Result<(FpcaBundle, CoefficientMatrix)> {
    let (data, stats) = standardize(raw)?;
    let ctx = FpcaContext::new(basis, data.times())?;
    let max_qc = (data.n().saturating_sub(1)).min(basis.n_basis);
    let fit_qc = match rule {
        ComponentRule::Fixed(q) => q,
        ComponentRule::Proportion { .. } => max_qc,
    };
    let full: Vec<SensorFpcaModel> = (0..data.p())
        .into_par_iter()
        .map(|s| {
            let mut m = ctx.fit_sensor(&data, s, fit_qc)?;
            m.standardization = stats[s];
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let (q_c, selection) = match rule {
        ComponentRule::Fixed(q) => (q, None),
        ComponentRule::Proportion { alpha, beta } => {
            let sel = select_num_components(&full, alpha, beta)?;
            (sel.q_c, Some(sel))
        }
    };
    let models: Vec<SensorFpcaModel> = full.iter().map(|m| m.truncated(q_c)).collect::<Result<_>>()?;
    let blocks = models
        .iter()
        .map(|model| {
            let mut block = DMatrix::zeros(data.n(), q_c);
            for i in 0..data.n() {
                for (l, v) in ctx.scores(model, data.curve(i, model.sensor))?.into_iter().enumerate() {
                    block[(i, l)] = v;
                }
            }
            Ok(block)
        })
        .collect::<Result<Vec<_>>>()?;
    let coeffs = assemble_coefficients(&blocks, data.sensor_names().to_vec())?;
    Ok((
        FpcaBundle {
            basis: basis.clone(),
            q_c,
            selection,
            models,
        },
        coeffs,
    ))
}
