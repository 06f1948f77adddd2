//! Replicated factor sweeps over sample size, noise ratio and signal
//! strength.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::design::{generate_dataset, SimulationDesign};
use super::metrics::{ari, mae_m, quartiles, removal_counts};
use crate::bspline::build_basis;
use crate::em::{EmOptions, PenaltyKind};
use crate::error::{Error, Result};
use crate::fpca::{reduce_dataset, ComponentRule};
use crate::seeds::derive_seed;
use crate::select::{model_search, SearchGrid, SearchOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    SampleSize,
    NoiseRatio,
    SignalStrength,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::SampleSize, Scenario::NoiseRatio, Scenario::SignalStrength];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::SampleSize => "sample-size",
            Scenario::NoiseRatio => "noise-ratio",
            Scenario::SignalStrength => "signal-strength",
        }
    }

    /// Levels swept by default: n, p_noise or δ.
    pub fn default_levels(&self) -> Vec<f64> {
        match self {
            Scenario::SampleSize => vec![50.0, 200.0, 350.0, 500.0],
            Scenario::NoiseRatio => vec![8.0, 16.0, 32.0, 64.0],
            Scenario::SignalStrength => vec![1.0, 1.5, 2.0, 2.5],
        }
    }

    /// The factor's column name in result tables.
    pub fn factor(&self) -> &'static str {
        match self {
            Scenario::SampleSize => "n",
            Scenario::NoiseRatio => "p_noise",
            Scenario::SignalStrength => "delta",
        }
    }

    /// `base` with the swept factor set to `level`.
    pub fn apply(&self, base: &SimulationDesign, level: f64) -> Result<SimulationDesign> {
        let count = |x: f64| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::InvalidArgument(format!("{} level must be a whole number, got {x}", self.factor())))
            }
        };
        let mut d = base.clone();
        match self {
            Scenario::SampleSize => d.n = count(level)?,
            Scenario::NoiseRatio => d.p_noise = count(level)?,
            Scenario::SignalStrength => d.delta = level,
        }
        d.validate()?;
        Ok(d)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenario: Scenario,
    pub levels: Vec<f64>,
    pub reps: usize,
    /// Penalized kinds; the no-penalty baseline is added when `baseline`.
    pub kinds: Vec<PenaltyKind>,
    pub baseline: bool,
    pub seed: u64,
    pub q_c: usize,
    pub grid: SearchGrid,
    pub em: EmOptions,
    pub base: SimulationDesign,
}

impl BenchmarkConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            levels: scenario.default_levels(),
            reps: 50,
            kinds: PenaltyKind::PENALIZED.to_vec(),
            baseline: true,
            seed: 2024,
            q_c: 3,
            grid: SearchGrid::default(),
            em: EmOptions::default(),
            base: SimulationDesign::default(),
        }
    }

    fn all_kinds(&self) -> Vec<PenaltyKind> {
        let mut kinds: Vec<PenaltyKind> = self.kinds.iter().copied().filter(|&k| k != PenaltyKind::None).collect();
        if self.baseline || self.kinds.contains(&PenaltyKind::None) {
            kinds.push(PenaltyKind::None);
        }
        kinds
    }

    /// Seed of the dataset for `(level index, replicate)`.
    pub fn dataset_seed(&self, level_index: usize, rep: usize) -> u64 {
        derive_seed(derive_seed(self.seed, level_index as u64), rep as u64)
    }
}

/// One (replicate, penalty kind) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: Scenario,
    pub level: f64,
    pub replicate: usize,
    pub seed: u64,
    pub kind: PenaltyKind,
    pub m_hat: Option<usize>,
    pub ari: Option<f64>,
    pub removed_correct: Option<usize>,
    pub removed_falsely: Option<usize>,
    pub variables_removed: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    /// Largest rise of the penalized objective over every EM run in the
    /// search.
    pub max_objective_increase: Option<f64>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    fn failed(scenario: Scenario, level: f64, replicate: usize, seed: u64, kind: PenaltyKind, error: String) -> Self {
        Self {
            scenario,
            level,
            replicate,
            seed,
            kind,
            m_hat: None,
            ari: None,
            removed_correct: None,
            removed_falsely: None,
            variables_removed: None,
            lambda: None,
            gamma: None,
            max_objective_increase: None,
            error: Some(error),
        }
    }
}

/// Aggregate over the replicates of one (level, kind).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub scenario: Scenario,
    pub level: f64,
    pub kind: PenaltyKind,
    pub mae_m: f64,
    pub variables_removed: f64,
    pub removed_correct: f64,
    pub removed_falsely: f64,
    pub ari_q1: f64,
    pub ari_median: f64,
    pub ari_q3: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchmarkRow>,
    pub replicates: Vec<ReplicateRecord>,
}

/// Runs one replicate: simulate, reduce with a fixed q_c, then search each
/// kind on the same coefficient matrix.
pub fn run_replicate(config: &BenchmarkConfig, level_index: usize, rep: usize) -> Vec<ReplicateRecord> {
    let level = config.levels[level_index];
    let seed = config.dataset_seed(level_index, rep);
    let kinds = config.all_kinds();
    let fail_all = |msg: String| {
        log::warn!("{} level {level} replicate {rep}: {msg}", config.scenario);
        kinds
            .iter()
            .map(|&k| ReplicateRecord::failed(config.scenario, level, rep, seed, k, msg.clone()))
            .collect()
    };
    let prepared = (|| {
        let mut design = config.scenario.apply(&config.base, level)?;
        design.seed = seed;
        let data = generate_dataset(&design)?;
        let basis = build_basis(design.times[0], design.times[design.times.len() - 1], design.n_basis, design.order)?;
        let (_, coeffs) = reduce_dataset(&data, &basis, ComponentRule::Fixed(config.q_c))?;
        Ok::<_, Error>((design, data, coeffs))
    })();
    let (design, data, coeffs) = match prepared {
        Ok(v) => v,
        Err(e) => return fail_all(e.to_string()),
    };
    let truth = data.labels().expect("simulated data carries labels");
    let options = SearchOptions {
        seed: derive_seed(seed, 0x5eed),
        em: config.em,
    };
    kinds
        .iter()
        .map(|&kind| {
            let outcome = model_search(&coeffs, &config.grid, kind, &options).and_then(|report| {
                let counts = removal_counts(
                    report.removed_sensors(),
                    &design.signal_sensors(),
                    &design.noise_sensors(),
                    report.best.params.removed_columns().len(),
                )?;
                let rise = report
                    .rows
                    .iter()
                    .map(|r| r.max_objective_increase)
                    .fold(0.0, f64::max);
                Ok(ReplicateRecord {
                    scenario: config.scenario,
                    level,
                    replicate: rep,
                    seed,
                    kind,
                    m_hat: Some(report.chosen.m),
                    ari: Some(ari(truth, &report.best.hard_labels)?),
                    removed_correct: Some(counts.correct),
                    removed_falsely: Some(counts.falsely),
                    variables_removed: Some(counts.variables_removed),
                    lambda: Some(report.chosen.lambda),
                    gamma: Some(report.chosen.gamma),
                    max_objective_increase: Some(rise),
                    error: None,
                })
            });
            outcome.unwrap_or_else(|e| {
                log::warn!("{} level {level} replicate {rep} kind {kind}: {e}", config.scenario);
                ReplicateRecord::failed(config.scenario, level, rep, seed, kind, e.to_string())
            })
        })
        .collect()
}

/// Aggregates replicate records into one row per (level, kind), in the
/// order of `config.levels` and the configured kinds.
pub fn aggregate(config: &BenchmarkConfig, records: &[ReplicateRecord], m_true: usize) -> Vec<BenchmarkRow> {
    let mut rows = Vec::new();
    for &level in &config.levels {
        for kind in config.all_kinds() {
            let mut group: Vec<&ReplicateRecord> = records
                .iter()
                .filter(|r| r.level == level && r.kind == kind)
                .collect();
            group.sort_by_key(|r| r.replicate);
            let ok: Vec<&&ReplicateRecord> = group.iter().filter(|r| r.error.is_none()).collect();
            let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            let m_hats: Vec<usize> = ok.iter().filter_map(|r| r.m_hat).collect();
            let aris: Vec<f64> = ok.iter().filter_map(|r| r.ari).collect();
            let (q1, med, q3) = quartiles(&aris);
            rows.push(BenchmarkRow {
                scenario: config.scenario,
                level,
                kind,
                mae_m: mae_m(&m_hats, m_true).unwrap_or(f64::NAN),
                variables_removed: mean(&|r| r.variables_removed.unwrap_or(0) as f64),
                removed_correct: mean(&|r| r.removed_correct.unwrap_or(0) as f64),
                removed_falsely: mean(&|r| r.removed_falsely.unwrap_or(0) as f64),
                ari_q1: q1,
                ari_median: med,
                ari_q3: q3,
                replicates: ok.len(),
                failures: group.len() - ok.len(),
            });
        }
    }
    rows
}

/// Runs the sweep. `sink` sees each replicate's records as soon as they
/// are available (possibly from several threads).
pub fn run_scenario_with(
    config: &BenchmarkConfig,
    sink: &(dyn Fn(&[ReplicateRecord]) + Sync),
) -> Result<BenchmarkResult> {
    if config.reps == 0 {
        return Err(Error::InvalidArgument("reps must be >= 1".into()));
    }
    if config.levels.is_empty() {
        return Err(Error::InvalidArgument("no scenario levels".into()));
    }
    config.grid.validate()?;
    for &level in &config.levels {
        config.scenario.apply(&config.base, level)?;
    }
    let jobs: Vec<(usize, usize)> = (0..config.levels.len())
        .flat_map(|l| (0..config.reps).map(move |r| (l, r)))
        .collect();
    let replicates: Vec<ReplicateRecord> = jobs
        .par_iter()
        .map(|&(l, r)| {
            let records = run_replicate(config, l, r);
            sink(&records);
            records
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let failures = replicates.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        log::warn!("{failures} of {} replicate fits failed", replicates.len());
    }
    let rows = aggregate(config, &replicates, config.base.m_true);
    Ok(BenchmarkResult { rows, replicates })
}

pub fn run_scenario(config: &BenchmarkConfig) -> Result<BenchmarkResult> {
    run_scenario_with(config, &|_| {})
}
