#![cfg_attr(not(any(feature = "std", test)), no_std)]

//! Quantized DLRM training core.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (only `alloc` is required):
//!
//! - [`quantizer`] symmetric uniform quantization, fake quantization and INT4 nibble packing
//! - [`model`] the DLRM-shaped network with per-table / per-channel QAT and an explicit backward pass
//! - [`comm`] a deterministic data-parallel simulator with sparse and INT8 gradient allreduce
//! - [`metrics`] accuracy and rank-based ROC AUC
//! - [`data`] feature transforms, categorical hashing, synthetic data and batching
//!
//! File formats, the metrics log and the command line live in the `dqrm` crate.

extern crate alloc;

pub mod comm;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quantizer;
pub mod real;

pub use error::{Error, Result};
pub use real::Real;
