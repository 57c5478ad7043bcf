//! Surrogate-assisted, transported distributional and quantile treatment
//! effects with missing primary outcomes.

pub mod dataset;
pub mod distribution;
pub mod error;
pub mod inference;
pub mod learners;
pub mod onestep;
pub mod oracle;
pub mod pipeline;
pub mod seed;

pub use dataset::{Arm, FoldAssignment, Observation, SourceRecord, Stratum, TauGrid, ThresholdGrid, TwoSampleDataset};
pub use error::{Error, Result};
