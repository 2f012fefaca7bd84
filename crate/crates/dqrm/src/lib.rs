//! File formats, data loading, metrics logging and training runs for the
//! quantized DLRM trainer in `dqrm-core`.
//!
//! - [`criteo`] Criteo TSV reading and writing (plain or gzip)
//! - [`format`] the bit-packed binary model file
//! - [`log`] the JSON-lines metrics log
//! - [`config`] `key = value` run configuration
//! - [`train`] end-to-end training runs in single, replicated and simulated data-parallel modes
//! - [`inspect`] weight histograms and model summaries

pub mod config;
pub mod criteo;
pub mod error;
pub mod format;
pub mod inspect;
pub mod log;
pub mod train;

pub use dqrm_core as core;
pub use error::{Error, ExitKind, Result};
