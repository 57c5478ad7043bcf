//! Simulation laws, ground truth, oracle variances and the replication
//! harness behind the experiment suite.

pub mod config;
pub mod dgp;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod theory;
pub mod truth;

pub use config::{Cell, Estimator, ExperimentConfig};
pub use dgp::DgpSpec;
pub use error::{SimError, SimResult};
pub use experiment::{run_experiment, RunOptions};
pub use report::ExperimentReport;
pub use truth::{compute_truth, TruthTable};
