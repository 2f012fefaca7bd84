use alloc::format;
use alloc::vec::Vec;

use super::wire::{account_bytes, Message};
use super::DpConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quantizer::Bits;

/// Closed-form bytes one node sends per iteration under one setting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommReportRow {
    pub setting: &'static str,
    pub bytes_per_node: u64,
}

/// Per-node traffic for dense FP32, sparse FP32 and sparse INT8 gradient
/// exchange. Each sample contributes one row per table, so a node touches
/// at most `min(batch / nodes, rows)` unique rows of each table; the
/// sparse rows use that bound.
pub fn comm_report(model: &ModelConfig, global_batch: usize, dp: &DpConfig) -> Result<Vec<CommReportRow>> {
    dp.validate()?;
    if global_batch == 0 || !global_batch.is_multiple_of(dp.nodes) {
        return Err(Error::Batch(format!(
            "batch size {global_batch} not divisible by {} nodes",
            dp.nodes
        )));
    }
    let local = global_batch / dp.nodes;
    let d = model.embed_dim;
    let mlp: Vec<Message> = model
        .bottom_shapes()
        .into_iter()
        .chain(model.top_shapes())
        .flat_map(|(i, o)| [Message::Dense { elements: i * o }, Message::Dense { elements: o }])
        .collect();
    let sparse: Vec<Message> = model
        .table_rows
        .iter()
        .map(|&r| Message::Sparse {
            rows: local.min(r),
            dim: d,
        })
        .collect();

    let dense_tables: Vec<Message> = model
        .table_rows
        .iter()
        .map(|&r| Message::Dense { elements: r * d })
        .collect();
    let fp32_dense = [mlp.as_slice(), &dense_tables].concat();
    let fp32_sparse = [mlp.as_slice(), &sparse].concat();
    let int8: Vec<Message> = fp32_sparse.iter().flat_map(|&m| [Message::Scale, m]).collect();

    let ib = dp.index_bytes;
    Ok(alloc::vec![
        row("fp32 dense", account_bytes(&fp32_dense, None, ib).total()),
        row("fp32 sparse-emb", account_bytes(&fp32_sparse, None, ib).total()),
        row("int8 sparse-emb", account_bytes(&int8, Some(Bits::INT8), ib).total()),
    ])
}

fn row(setting: &'static str, bytes_per_node: u64) -> CommReportRow {
    CommReportRow {
        setting,
        bytes_per_node,
    }
}
