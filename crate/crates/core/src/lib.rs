//! Latest-checkpoint weight averaging.
//!
//! The crate bundles the averaging schemes ([`avg`]), a binary checkpoint
//! format ([`checkpoint`]), baseline optimizers and schedules ([`optim`]),
//! a small deterministic MLP trainer ([`engine`]), synthetic and CSV data
//! ([`data`]), and the command-line layer ([`cli`]).

pub mod avg;
pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod rng;

pub use error::{Error, Result};
pub use param::{Checkpoint, DType, ParameterSet, Tensor};
