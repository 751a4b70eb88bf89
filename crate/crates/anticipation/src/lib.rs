//! On-disk formats and the command-line pipeline around `anticipation-core`:
//! TNS1 tensors ([`tns`]), checkpoints, dataset directories ([`store`]),
//! score files, the flat run configuration and the commands themselves.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod scorefile;
pub mod store;
pub mod tns;

pub use error::{Error, Result};
