//! Files, configuration, parallel executors and commands around `tec-core`.

pub mod config;
pub mod error;
pub mod io;
pub mod parallel;
pub mod pipeline;

pub use config::{Overrides, RunConfig};
pub use error::{Result, SimError};
