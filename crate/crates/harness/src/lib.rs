//! End-to-end driver for the EM trajectory optimizer on the planar point
//! mass: configuration, seeded loop, exports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod export;
pub mod pipeline;
pub mod seeds;

pub use config::{RunConfig, Variant};
pub use error::{Stage, StageError};
pub use export::{export_results, Manifest};
pub use pipeline::{
    generate_observations, run_soc_em, EvalStats, IterationRecord, RunOutput, UpdateRecord,
};
