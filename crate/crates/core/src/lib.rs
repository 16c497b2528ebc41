//! Data curation as per-sample weighting: online reweighting by similarity
//! to an anchor set, offline threshold selection and domain mixing, all
//! driven through one weighted SGD update on a byte-level transformer, with
//! exact FLOPs accounting.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod flops;
pub mod gating;
pub mod report;
pub mod scoring;
pub mod tinymodel;
pub mod trainer;

pub use error::{CuratorError, Result};

/// Version string embedded in every emitted artifact.
pub const ARTIFACT_VERSION: &str = concat!("curator ", env!("CARGO_PKG_VERSION"));
