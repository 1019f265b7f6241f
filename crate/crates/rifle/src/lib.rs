//! Host-side companion to `rifle-core`: IDX ingestion, binary model and
//! update records, the experiment config format, the round orchestrator and
//! CSV/JSON reporting.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod idx;
pub mod oracle;
pub mod report;

pub use config::{DatasetSpec, Defense, ExperimentConfig};
pub use error::{Error, Result};
pub use harness::{run_experiment, run_experiment_in, simulate, ExperimentResult, World};
