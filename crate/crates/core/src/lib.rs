//! Allocation-only core of the transactive energy community simulator.
//!
//! The crate holds every numeric piece of the pipeline and performs no IO:
//!
//! * [`model`]: VPPs, scenarios, flow direction and 15-minute time series.
//! * [`analytic`]: centralized KKT solution of the aggregation QP plus an
//!   independent dual-ascent oracle.
//! * [`consensus`]: the fully distributed consensus + innovations solver over
//!   a simulated synchronous message-passing graph.
//! * [`forecast`]: from-scratch learners, FedAvg, client sampling and
//!   transfer-initialized federated training.
//! * [`data`]: synthetic prosumer profiles, community aggregation, splits.
//! * [`harness`]: day simulation and the price/forecast metrics.
//!
//! File formats, configuration and the command-line driver live in the
//! `tec-sim` companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analytic;
pub mod consensus;
pub mod data;
pub mod error;
pub mod forecast;
pub mod harness;
mod math;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
