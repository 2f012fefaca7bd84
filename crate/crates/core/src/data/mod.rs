//! Feature transforms, categorical hashing, synthetic click data and batching.
//!
//! Parsing Criteo text lives in the `dqrm` crate; this module starts from
//! already-split fields.

mod batch;
mod features;
mod synth;

pub use batch::{make_batches, Batch, Batches};
pub use features::{dense_transform, fnv1a64, hash_categorical, RawRecord, Sample};
pub use synth::{generate_synthetic, SynthRecord, SynthSpec, SyntheticStream};

/// Integer features per Criteo record.
pub const DENSE_FEATURES: usize = 13;
/// Categorical features per Criteo record.
pub const SPARSE_FEATURES: usize = 26;
