//! Simulation study: data generator, metrics and replicated scenarios.

pub mod design;
pub mod metrics;
pub mod scenario;
pub mod systemb;

pub use design::{generate_dataset, FrozenSignals, SimulationDesign};
pub use metrics::{ari, mae_m, quartiles, removal_counts, RemovalCounts};
pub use scenario::{
    aggregate, run_replicate, run_scenario, run_scenario_with, BenchmarkConfig, BenchmarkResult, BenchmarkRow,
    ReplicateRecord, Scenario,
};
pub use systemb::{generate_system_b, SystemBDesign};
