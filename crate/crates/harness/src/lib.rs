//! Configuration, synthetic data and the train/sample/eval workflows behind
//! the `sesa` command.

pub mod attn;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod crop;
pub mod error;
pub mod eval;
pub mod optim;
pub mod sample;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
