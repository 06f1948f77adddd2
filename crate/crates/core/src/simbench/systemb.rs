//! Synthetic stand-in for the 43-sensor engineering dataset: most sensors
//! need three components to pass 80% explained variance, a few need many.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bspline::{build_basis, gram_matrix};
use crate::error::{Error, Result};
use crate::fpca::FunctionalDataSet;
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemBDesign {
    pub n: usize,
    /// Sensors whose cluster means differ.
    pub informative: usize,
    /// Sensors with the same low-rank profile but no cluster effect.
    pub uninformative: usize,
    /// Sensors with a flat spectrum (no short expansion captures them).
    pub diffuse: usize,
    pub m_true: usize,
    pub times: Vec<f64>,
    pub n_basis: usize,
    pub order: usize,
    /// Score variances of the low-rank sensors.
    pub profile: Vec<f64>,
    /// Size of the cluster shift in informative sensors.
    pub shift: f64,
    pub measurement_sd: f64,
    pub seed: u64,
}

impl Default for SystemBDesign {
    fn default() -> Self {
        Self {
            n: 419,
            informative: 20,
            uninformative: 16,
            diffuse: 7,
            m_true: 4,
            times: (1..=30).map(f64::from).collect(),
            n_basis: 12,
            order: 3,
            profile: vec![1.0, 0.6, 0.4, 0.1, 0.1],
            shift: 1.0,
            measurement_sd: 0.02,
            seed: 42,
        }
    }
}

impl SystemBDesign {
    pub fn p(&self) -> usize {
        self.informative + self.uninformative + self.diffuse
    }
}

/// `k` coefficient vectors orthonormal in the L2 inner product of the
/// spline space.
fn orthonormal_functions(gram: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let h = gram.nrows();
    let raw = DMatrix::from_fn(h, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = raw.qr().q();
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("Gram matrix is not positive definite".into()))?;
    let lt = chol.l().transpose();
    lt.solve_upper_triangular(&q)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))
}

/// Draws the analog dataset (unstandardized) with true cluster labels.
pub fn generate_system_b(design: &SystemBDesign) -> Result<FunctionalDataSet> {
    let k = design.profile.len();
    if design.n < 2 || design.p() == 0 || k < 3 || design.m_true == 0 || design.times.len() < 2 {
        return Err(Error::InvalidArgument("degenerate System-B design".into()));
    }
    let lo = design.times[0];
    let hi = design.times[design.times.len() - 1];
    let basis = build_basis(lo, hi, design.n_basis, design.order)?;
    let x = basis.design_matrix(&design.times)?;
    let gram = gram_matrix(&basis)?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let pick = WeightedIndex::new(vec![1.0; design.m_true]).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let labels: Vec<usize> = (0..design.n).map(|_| pick.sample(&mut rng)).collect();

    let p = design.p();
    let tau = design.times.len();
    let mut values = vec![0.0; design.n * p * tau];
    for s in 0..p {
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(design.seed, s as u64 + 1));
        let funcs = orthonormal_functions(&gram, k, &mut srng)?;
        let curves = &x * &funcs;
        let diffuse = s >= design.informative + design.uninformative;
        let informative = s < design.informative;
        for (i, &label) in labels.iter().enumerate() {
            let angle = std::f64::consts::TAU * label as f64 / design.m_true as f64;
            for (l, &var) in design.profile.iter().enumerate() {
                let var = if diffuse { 1.0 } else { var };
                let mut score = var.sqrt() * srng.sample::<f64, _>(StandardNormal);
                if informative && l == 0 {
                    score += design.shift * angle.cos();
                }
                if informative && l == 2 {
                    score += design.shift * angle.sin();
                }
                let base = (i * p + s) * tau;
                for t in 0..tau {
                    values[base + t] += score * curves[(t, l)];
                }
            }
            let base = (i * p + s) * tau;
            for t in 0..tau {
                values[base + t] += design.measurement_sd * srng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let obs_ids = (1..=design.n).map(|i| format!("event{i:03}")).collect();
    let names = (1..=p).map(|s| format!("sensor{s:02}")).collect();
    FunctionalDataSet::new(design.times.clone(), values, obs_ids, names)?.with_labels(labels)
}
