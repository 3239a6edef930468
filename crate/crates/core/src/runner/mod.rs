//! Experiment orchestration: datasets, configuration, the predict-correct
//! pipeline over a `T2` grid, results files and bound verification.

pub mod config;
pub mod datasets;
pub mod pipeline;
pub mod results;
pub mod verify;

pub use config::SamplerConfig;
pub use datasets::generate_dataset;
pub use pipeline::{run, run_to};
pub use results::{BoundStatus, RunResults};
pub use verify::{verify_bounds, verify_results, VerifyReport};
