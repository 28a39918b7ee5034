//! Experiment orchestration: configs, the training loop, runs, sweeps and
//! plots.

pub mod config;
pub mod log;
pub mod plots;
pub mod run;
pub mod sweep;
pub mod train;

pub use config::{Method, MkdMode, RunConfig, SnapshotMode};
pub use log::MetricLog;
pub use plots::emit_plots;
pub use run::{run_experiment, run_with_data, RunRecord};
pub use sweep::{sweep, SweepSpec, SweepTable};
pub use train::{Phase, TrainLoop};
