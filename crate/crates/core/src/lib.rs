//! Few-for-many personalized federated learning simulator.
//!
//! A server keeps `K` shared models and trains them against `M` clients by
//! descending a doubly smoothed Tchebycheff set objective. Each client is
//! finally served by whichever of the `K` models fits it best. FedAvg, IFCA
//! and local-only training are included as baselines.
//!
//! The federation is simulated in-process and every run is a pure function
//! of its [`federation::ExperimentConfig`].

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalarization;

pub use error::{Error, Result};
