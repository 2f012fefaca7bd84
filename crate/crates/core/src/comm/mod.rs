//! Deterministic in-process simulation of data-parallel training with
//! compressed gradient allreduce.
//!
//! Each iteration every node computes gradients on its shard. Embedding
//! gradients travel as row-sparse messages. With gradient quantization on,
//! the allreduce runs in two phases: nodes first agree on one scale per
//! tensor (max of the local scales), then quantize with it and sum the
//! integer codes in a wide accumulator. MLP tensors can carry the
//! quantization residual into the next iteration (error compensation).
//! All reductions run in ascending rank order, so results do not depend on
//! scheduling.

mod allreduce;
mod dp;
mod ec;
mod report;
mod simulated;
mod sparse;
mod wire;

pub use allreduce::{
    allreduce_sum_dense, allreduce_union_sparse, allreduce_union_sparse_float, dequant_average, local_grad_scale,
    mean_dense, quantize_grad, unify_scales, SparseCodes,
};
pub use dp::{run_dp_step, DataParallel, DpStepReport, EcTrace};
pub use ec::{ec_correct, ec_update, ErrorBuffer};
pub use report::{comm_report, CommReportRow};
pub use simulated::{run_simulated_dp, SimulatedDp};
pub use sparse::{coalesce_sparse, SparseGradient};
pub use wire::{
    account_bytes, code_bytes, encode_codes, encode_dense_f32, encode_scale, encode_sparse, CommRecord, Message,
    SparsePayload, SCALE_BYTES,
};

use alloc::format;

use crate::error::{Error, Result};
use crate::quantizer::Bits;

/// Which gradient tensors carry quantization residuals across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EcMode {
    None,
    Mlp,
    All,
}

impl EcMode {
    pub fn covers_mlp(self) -> bool {
        matches!(self, EcMode::Mlp | EcMode::All)
    }

    pub fn covers_tables(self) -> bool {
        self == EcMode::All
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpConfig {
    pub nodes: usize,
    /// 8 or 16 for quantized gradients, 32 for FP32.
    pub grad_bits: u32,
    pub ec_mode: EcMode,
    /// Send embedding gradients row-sparse instead of as dense tables.
    pub sparse_emb: bool,
    /// Bytes per row index on the wire (4 or 8).
    pub index_bytes: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            nodes: 1,
            grad_bits: 32,
            ec_mode: EcMode::None,
            sparse_emb: true,
            index_bytes: 8,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Config("node count must be >= 1".into()));
        }
        if !matches!(self.grad_bits, 8 | 16 | 32) {
            return Err(Error::Config(format!(
                "gradient bit-width {} not in {{8, 16, 32}}",
                self.grad_bits
            )));
        }
        if !matches!(self.index_bytes, 4 | 8) {
            return Err(Error::Config(format!(
                "index wire size {} not in {{4, 8}}",
                self.index_bytes
            )));
        }
        Ok(())
    }

    pub fn grad_quant(&self) -> Option<Bits> {
        Bits::from_config(self.grad_bits).ok().flatten()
    }
}
