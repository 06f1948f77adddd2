use std::fs;
use std::path::Path;

use clap::Args;
use funclust::em::{EmOptions, PenaltyKind};
use funclust::fpca::ComponentRule;
use funclust::select::SearchGrid;
use funclust::simbench::Scenario;
use serde::Deserialize;

use crate::UsageError;

/// Keys accepted in the TOML config file. Names match the long flags.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub n_basis: Option<usize>,
    pub order: Option<usize>,
    pub qc: Option<usize>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub penalty: Option<Vec<PenaltyKind>>,
    pub m_grid: Option<Vec<usize>>,
    pub gamma_grid: Option<Vec<f64>>,
    pub lambda_grid: Option<Vec<f64>>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub restarts: Option<usize>,
    pub n: Option<usize>,
    pub p_signal: Option<usize>,
    pub p_noise: Option<usize>,
    pub delta: Option<f64>,
    pub scenario: Option<Scenario>,
    pub levels: Option<Vec<f64>>,
    pub reps: Option<usize>,
    pub baseline: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, UsageError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct BasisArgs {
    /// Number of B-spline basis functions.
    #[arg(long)]
    pub n_basis: Option<usize>,
    /// B-spline order (3 = quadratic).
    #[arg(long)]
    pub order: Option<usize>,
    /// Fixed number of components per sensor; disables the α/β rule.
    #[arg(long)]
    pub qc: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

impl BasisArgs {
    pub fn n_basis(&self, file: &FileConfig) -> usize {
        self.n_basis.or(file.n_basis).unwrap_or(12)
    }

    pub fn order(&self, file: &FileConfig) -> usize {
        self.order.or(file.order).unwrap_or(3)
    }

    pub fn rule(&self, file: &FileConfig) -> Result<ComponentRule, UsageError> {
        let qc = self.qc.or(file.qc);
        let alpha = self.alpha.or(file.alpha);
        let beta = self.beta.or(file.beta);
        match qc {
            Some(_) if alpha.is_some() || beta.is_some() => {
                Err(UsageError("give either a fixed q_c or the α/β rule, not both".into()))
            }
            Some(0) => Err(UsageError("q_c must be at least 1".into())),
            Some(q) => Ok(ComponentRule::Fixed(q)),
            None => {
                let (alpha, beta) = (alpha.unwrap_or(0.8), beta.unwrap_or(0.8));
                if !(alpha > 0.0 && alpha <= 1.0 && beta > 0.0 && beta <= 1.0) {
                    return Err(UsageError("α and β must lie in (0, 1]".into()));
                }
                Ok(ComponentRule::Proportion { alpha, beta })
            }
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SearchArgs {
    /// Penalty kinds, comma separated: group, variable, individual, none.
    #[arg(long, value_delimiter = ',')]
    pub penalty: Option<Vec<PenaltyKind>>,
    /// Candidate numbers of clusters, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Option<Vec<usize>>,
    /// Single number of clusters (same as a one-element --m-grid).
    #[arg(long, conflicts_with = "m_grid")]
    pub m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub gamma_grid: Option<Vec<f64>>,
    /// λ multipliers; the grid is these times n^(1/3).
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// EM restarts after an emptied cluster.
    #[arg(long)]
    pub restarts: Option<usize>,
}

impl SearchArgs {
    pub fn kinds(&self, file: &FileConfig, default: &[PenaltyKind]) -> Result<Vec<PenaltyKind>, UsageError> {
        let mut kinds = self.penalty.clone().or_else(|| file.penalty.clone()).unwrap_or_else(|| default.to_vec());
        kinds.dedup();
        if kinds.is_empty() {
            return Err(UsageError("no penalty kind given".into()));
        }
        Ok(kinds)
    }

    pub fn grid(&self, file: &FileConfig) -> Result<SearchGrid, UsageError> {
        let mut grid = SearchGrid::default();
        if let Some(m) = self.m.map(|m| vec![m]).or_else(|| self.m_grid.clone()).or_else(|| file.m_grid.clone()) {
            grid.m_values = m;
        }
        if let Some(g) = self.gamma_grid.clone().or_else(|| file.gamma_grid.clone()) {
            grid.gamma_values = g;
        }
        if let Some(l) = self.lambda_grid.clone().or_else(|| file.lambda_grid.clone()) {
            grid.lambda_multipliers = l;
        }
        grid.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(grid)
    }

    pub fn seed(&self, file: &FileConfig, default: u64) -> u64 {
        self.seed.or(file.seed).unwrap_or(default)
    }

    pub fn em(&self, file: &FileConfig) -> Result<EmOptions, UsageError> {
        let mut em = EmOptions::default();
        if let Some(tol) = self.tol.or(file.tol) {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(UsageError("tolerance must be positive".into()));
            }
            em.tol = tol;
        }
        if let Some(it) = self.max_iter.or(file.max_iter) {
            if it == 0 {
                return Err(UsageError("max-iter must be at least 1".into()));
            }
            em.max_iter = it;
        }
        if let Some(r) = self.restarts.or(file.restarts) {
            em.restarts = r;
        }
        Ok(em)
    }
}
