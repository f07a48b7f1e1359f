//! Reweighted dynamic sparse training.
//!
//! Trains masked subnetworks from scratch with prune-and-grow topology
//! updates and a group-reweighted loss, next to the dense, reweighted,
//! unweighted-sparse and mask-learning baselines, on synthetic biased
//! image-classification data.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod objective;
pub mod rng;
pub mod sparsity;
pub mod trainers;

pub use error::{Error, Result};
