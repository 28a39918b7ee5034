//! Online class-incremental learning with momentum knowledge distillation.
//!
//! The crate provides the full pipeline needed to study an exponential moving
//! average (EMA) teacher distilled into a replay-based student on a one-pass
//! stream:
//!
//! - [`dataset`] and [`datastream`]: class-incremental task schedules and the
//!   clear/blurry training streams.
//! - [`replay`]: reservoir-sampled episodic memory.
//! - [`augment`]: the `full` and `partial` augmentation policies.
//! - [`model`]: a small classifier with a flat parameter view and manual
//!   backpropagation.
//! - [`teacher`]: EMA updates, the `alpha -> lambda` rule and weight averaging.
//! - [`losses`]: ER, DER++, ER-ACE, momentum distillation and snapshot
//!   distillation objectives.
//! - [`boundary`]: task-change inference for blurry streams.
//! - [`metrics`]: accuracy matrices, backward transfer, NCM probe, feature
//!   drift and confusion matrices.
//! - [`harness`]: configuration, the training loop, experiments, sweeps and
//!   plots.

pub mod augment;
pub mod boundary;
pub mod dataset;
pub mod datastream;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod replay;
pub mod scalar;
pub mod seed;
pub mod teacher;

pub use error::{Error, Result};
pub use scalar::Scalar;
