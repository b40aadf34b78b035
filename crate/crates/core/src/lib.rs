// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod convergence;
pub mod coordinator;
pub mod dispatcher;
pub mod domain;
pub mod engine;
pub mod error;
pub mod fit;
pub mod launcher;
pub mod metrics;
pub mod oracle;
pub mod perf;
pub mod rng;
pub mod state_manager;
pub mod workload;

pub use error::{Error, Result};
