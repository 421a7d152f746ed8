//! File formats, training harness and command line for test-time-training
//! layers built on `mttt-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod idx;
pub mod metrics;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
