//! Prototype calibration engine for few-shot class-incremental learning.
//!
//! The engine works on precomputed embeddings. Each stage of an incremental
//! run contributes a set of raw class prototypes (support-set means), which are
//! refined by learnable class-specific offsets and a task-level offset mapped
//! through small per-class projectors. Queries are classified by ridge
//! reconstruction over the stacked prototype matrix, picking the class whose
//! normalized reconstruction residual is smallest.
//!
//! Module map:
//!
//! - [`embedding_store`]: EPTB embedding files, synthetic data, stage schedules.
//! - [`prototype`]: raw prototypes and the calibration pool (offsets, projectors, freezing).
//! - [`nep`]: the ridge-reconstruction classifier and baseline distance metrics.
//! - [`train`]: losses, exact gradients through the ridge solve, Adam, the stage loop.
//! - [`protocol`]: the multi-stage run, per-stage evaluation, baseline comparison.
//! - [`config`]: the JSON run configuration.
//! - [`gradcheck`]: randomized finite-difference check of the analytic gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod embedding_store;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod nep;
pub mod protocol;
pub mod prototype;
pub mod real;
pub mod rng;
pub mod train;

pub use config::RunConfig;
pub use embedding_store::{ClassId, EmbeddingDataset, ProtocolSpec, StagePlan, SynthSpec};
pub use error::{EptError, Result};
pub use real::Real;
