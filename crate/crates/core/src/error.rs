use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("t = {t} lies outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("rank-deficient spline design: {0}")]
    RankDeficient(String),

    #[error("sensor `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cluster {0} is empty (total responsibility below 1e-12)")]
    EmptyCluster(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dataset has {count} missing cells, first: {first:?}")]
    MissingCells {
        count: usize,
        first: Vec<(String, String, f64)>,
    },

    #[error("duplicate record for obs `{obs}`, sensor `{sensor}`, time {time}")]
    DuplicateRecord { obs: String, sensor: String, time: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("unsupported schema version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("unknown sensor {0}")]
    UnknownSensor(usize),

    #[error("every grid point failed: {}", .0.join("; "))]
    AllGridPointsFailed(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that come from the numerical routines rather than
    /// from malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::EmptyCluster(_)
                | Error::RankDeficient(_)
                | Error::AllGridPointsFailed(_)
        )
    }
}
