//! Spline-coefficient mixture generator.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bspline::build_basis;
use crate::error::{Error, Result};
use crate::fpca::{standardize, FunctionalDataSet};
use crate::seeds::derive_seed;

const FROZEN: &str = include_str!("../../data/signal_design.json");

/// Signal constants shipped with the crate. `signal_means` is indexed
/// `[sensor][cluster][coefficient]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenSignals {
    pub master_seed: u64,
    pub spreads: Vec<f64>,
    pub signal_means: Vec<Vec<Vec<f64>>>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl FrozenSignals {
    pub fn load() -> Self {
        serde_json::from_str(FROZEN).expect("bundled signal design is valid JSON")
    }
}

/// Cluster mean coefficients for each signal sensor: independent centred
/// Gaussians with the given per-sensor spread.
pub fn draw_signal_means(master_seed: u64, spreads: &[f64], m: usize, h: usize) -> Vec<Vec<Vec<f64>>> {
    spreads
        .iter()
        .enumerate()
        .map(|(s, &spread)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, s as u64));
            (0..m)
                .map(|_| (0..h).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub n: usize,
    pub p_signal: usize,
    pub p_noise: usize,
    /// Divides every coefficient variance.
    pub delta: f64,
    pub m_true: usize,
    pub proportions: Vec<f64>,
    pub n_basis: usize,
    pub order: usize,
    pub times: Vec<f64>,
    /// `[sensor][cluster][coefficient]`; reused cyclically when
    /// `p_signal` exceeds the stored sensors.
    pub signal_means: Vec<Vec<Vec<f64>>>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub seed: u64,
}

impl Default for SimulationDesign {
    fn default() -> Self {
        let frozen = FrozenSignals::load();
        Self {
            n: 200,
            p_signal: 2,
            p_noise: 16,
            delta: 1.5,
            m_true: 3,
            proportions: vec![1.0 / 3.0; 3],
            n_basis: 12,
            order: 3,
            times: (0..=30).map(f64::from).collect(),
            signal_means: frozen.signal_means,
            signal_variance: frozen.signal_variance,
            noise_variance: frozen.noise_variance,
            seed: 1,
        }
    }
}

impl SimulationDesign {
    pub fn p(&self) -> usize {
        self.p_signal + self.p_noise
    }

    pub fn signal_sensors(&self) -> Vec<usize> {
        (0..self.p_signal).collect()
    }

    pub fn noise_sensors(&self) -> Vec<usize> {
        (self.p_signal..self.p()).collect()
    }

    pub fn sensor_names(&self) -> Vec<String> {
        (1..=self.p()).map(|s| format!("s{s}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n < 2 {
            return bad(format!("need n >= 2, got {}", self.n));
        }
        if self.p() == 0 {
            return bad("design has no sensors".into());
        }
        if self.times.len() < 2 {
            return bad("time grid needs at least two points".into());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.m_true == 0 || self.proportions.len() != self.m_true {
            return bad(format!(
                "{} proportions for m_true={}",
                self.proportions.len(),
                self.m_true
            ));
        }
        let sum: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("proportions must be >= 0 and sum to 1 (sum {sum})"));
        }
        if !(self.signal_variance > 0.0 && self.noise_variance > 0.0) {
            return bad("coefficient variances must be positive".into());
        }
        if self.p_signal > 0 {
            if self.signal_means.is_empty() {
                return bad("signal sensors requested but no signal means given".into());
            }
            for (s, sensor) in self.signal_means.iter().enumerate() {
                if sensor.len() != self.m_true || sensor.iter().any(|c| c.len() != self.n_basis) {
                    return bad(format!(
                        "signal means for sensor {s} must be {} clusters × {} coefficients",
                        self.m_true, self.n_basis
                    ));
                }
            }
        }
        build_basis(self.times[0], *self.times.last().unwrap_or(&0.0), self.n_basis, self.order)?.validate()
    }
}

/// Draws a labelled dataset from the design and standardizes every sensor.
pub fn generate_dataset(design: &SimulationDesign) -> Result<FunctionalDataSet> {
    design.validate()?;
    let basis = build_basis(design.times[0], design.times[design.times.len() - 1], design.n_basis, design.order)?;
    let x = basis.design_matrix(&design.times)?;
    let (n, p, h, tau) = (design.n, design.p(), design.n_basis, design.times.len());
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let pick = WeightedIndex::new(&design.proportions)
        .map_err(|e| Error::InvalidArgument(format!("proportions: {e}")))?;
    let signal_sd = (design.signal_variance / design.delta).sqrt();
    let noise_sd = (design.noise_variance / design.delta).sqrt();

    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * p * tau);
    let mut z = DMatrix::<f64>::zeros(h, 1);
    for _ in 0..n {
        let k = pick.sample(&mut rng);
        labels.push(k);
        for s in 0..p {
            for l in 0..h {
                let e: f64 = rng.sample(StandardNormal);
                z[l] = if s < design.p_signal {
                    design.signal_means[s % design.signal_means.len()][k][l] + signal_sd * e
                } else {
                    noise_sd * e
                };
            }
            values.extend((&x * &z).iter());
        }
    }
    let obs_ids = (1..=n).map(|i| format!("o{i}")).collect();
    let raw = FunctionalDataSet::new(design.times.clone(), values, obs_ids, design.sensor_names())?;
    let (data, _) = standardize(&raw)?;
    data.with_labels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_means_regenerate_from_master_seed() {
        let f = FrozenSignals::load();
        let drawn = draw_signal_means(f.master_seed, &f.spreads, 3, 12);
        for (a, b) in drawn.iter().flatten().flatten().zip(f.signal_means.iter().flatten().flatten()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn default_shape() {
        let d = generate_dataset(&SimulationDesign::default()).unwrap();
        assert_eq!((d.n(), d.p(), d.tau()), (200, 18, 31));
        assert!(d.labels().unwrap().iter().all(|&k| k < 3));
    }

    #[test]
    fn deterministic_per_seed() {
        let design = SimulationDesign::default();
        assert_eq!(generate_dataset(&design).unwrap(), generate_dataset(&design).unwrap());
        let other = SimulationDesign { seed: 2, ..design };
        assert_ne!(
            generate_dataset(&SimulationDesign::default()).unwrap().values(),
            generate_dataset(&other).unwrap().values()
        );
    }

    #[test]
    fn huge_delta_collapses_onto_cluster_means() {
        let design = SimulationDesign {
            delta: 1e12,
            p_noise: 0,
            n: 60,
            ..Default::default()
        };
        let d = generate_dataset(&design).unwrap();
        let labels = d.labels().unwrap();
        for s in 0..2 {
            for k in 0..3 {
                let members: Vec<usize> = (0..60).filter(|&i| labels[i] == k).collect();
                let first = d.curve(members[0], s);
                for &i in &members[1..] {
                    for (a, b) in d.curve(i, s).iter().zip(first) {
                        assert!((a - b).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn cluster_shares_match_proportions() {
        let design = SimulationDesign {
            n: 10_000,
            p_signal: 1,
            p_noise: 0,
            ..Default::default()
        };
        let d = generate_dataset(&design).unwrap();
        for k in 0..3 {
            let share = d.labels().unwrap().iter().filter(|&&l| l == k).count() as f64 / 10_000.0;
            assert!((share - 1.0 / 3.0).abs() < 0.02, "cluster {k}: {share}");
        }
    }

    #[test]
    fn noise_sensor_means_agree_across_clusters() {
        let design = SimulationDesign {
            n: 20_000,
            p_signal: 1,
            p_noise: 1,
            seed: 5,
            ..Default::default()
        };
        let d = generate_dataset(&design).unwrap();
        let labels = d.labels().unwrap();
        let mut sums = vec![vec![0.0; 31]; 3];
        let mut counts = [0.0; 3];
        for i in 0..d.n() {
            counts[labels[i]] += 1.0;
            for (t, v) in d.curve(i, 1).iter().enumerate() {
                sums[labels[i]][t] += v;
            }
        }
        for t in 0..31 {
            let means: Vec<f64> = (0..3).map(|k| sums[k][t] / counts[k]).collect();
            let spread = means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - means.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(spread < 0.1, "t={t}: {spread}");
        }
    }

    #[test]
    fn invalid_designs_rejected() {
        let base = SimulationDesign::default();
        for bad in [
            SimulationDesign { delta: 0.0, ..base.clone() },
            SimulationDesign { proportions: vec![0.5, 0.5, 0.5], ..base.clone() },
            SimulationDesign { m_true: 2, ..base.clone() },
            SimulationDesign { n: 1, ..base.clone() },
        ] {
            assert!(matches!(generate_dataset(&bad), Err(Error::InvalidArgument(_))));
        }
    }
}
