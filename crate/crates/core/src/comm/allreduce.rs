use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::sparse::SparseGradient;
use crate::error::{Error, Result};
use crate::quantizer::{self, Bits, Scale};
use crate::real::Real;

/// Scale a node proposes for one of its gradient tensors. `None` for an
/// all-zero tensor, which places no constraint on the shared scale.
pub fn local_grad_scale<T: Real>(values: &[T], bits: Bits) -> Result<Option<Scale<T>>> {
    if values.is_empty() {
        return Ok(None);
    }
    let m = quantizer::max_abs(values)?;
    Ok((m > T::zero()).then(|| Scale::from_max_abs(m, bits)))
}

/// Shared scale: the largest local scale, so that no node's gradient clips.
/// Falls back to the degenerate scale when every node proposed `None`.
pub fn unify_scales<T: Real>(locals: &[Option<Scale<T>>], bits: Bits) -> Scale<T> {
    locals
        .iter()
        .flatten()
        .copied()
        .fold(None, |acc: Option<Scale<T>>, s| match acc {
            Some(a) if a.get() >= s.get() => Some(a),
            _ => Some(s),
        })
        .unwrap_or_else(|| Scale::degenerate(bits))
}

/// Codes for `values` under `scale`, plus the number of clipped elements.
pub fn quantize_grad<T: Real>(values: &[T], scale: Scale<T>, bits: Bits) -> (Vec<i32>, usize) {
    let clipped = values.iter().filter(|&&v| quantizer::clips(v, scale, bits)).count();
    (quantizer::quantize(values, scale, bits), clipped)
}

/// Element-wise sum of every node's codes in ascending rank order.
pub fn allreduce_sum_dense(parts: &[Vec<i32>]) -> Result<Vec<i64>> {
    let first = parts.first().ok_or(Error::EmptyTensor)?;
    let mut sums = vec![0i64; first.len()];
    for p in parts {
        if p.len() != sums.len() {
            return Err(Error::shape(sums.len(), p.len()));
        }
        for (s, &q) in sums.iter_mut().zip(p) {
            *s += i64::from(q);
        }
    }
    Ok(sums)
}

/// One node's quantized row-sparse gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseCodes {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub codes: Vec<i32>,
}

/// Union of the nodes' row sets with code sums per row. Output indices are
/// sorted.
pub fn allreduce_union_sparse(parts: &[SparseCodes]) -> Result<(Vec<u32>, Vec<i64>)> {
    let dim = parts.first().ok_or(Error::EmptyTensor)?.dim;
    let mut rows: BTreeMap<u32, Vec<i64>> = BTreeMap::new();
    for p in parts {
        if p.dim != dim || p.codes.len() != p.indices.len() * dim {
            return Err(Error::shape(p.indices.len() * dim, p.codes.len()));
        }
        for (k, &idx) in p.indices.iter().enumerate() {
            let acc = rows.entry(idx).or_insert_with(|| vec![0; dim]);
            for (a, &q) in acc.iter_mut().zip(&p.codes[k * dim..(k + 1) * dim]) {
                *a += i64::from(q);
            }
        }
    }
    let indices = rows.keys().copied().collect();
    let sums = rows.into_values().flatten().collect();
    Ok((indices, sums))
}

/// FP32 counterpart of [`allreduce_union_sparse`]: the first node holding a
/// row contributes it as-is, later nodes add in rank order.
pub fn allreduce_union_sparse_float<T: Real>(parts: &[&SparseGradient<T>]) -> Result<SparseGradient<T>> {
    let first = parts.first().ok_or(Error::EmptyTensor)?;
    let (table, dim) = (first.table, first.dim);
    let mut rows: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    for p in parts {
        if p.dim != dim {
            return Err(Error::shape(dim, p.dim));
        }
        for (k, &idx) in p.indices.iter().enumerate() {
            let row = p.row(k);
            match rows.get_mut(&idx) {
                Some(acc) => acc.iter_mut().zip(row).for_each(|(a, &g)| *a += g),
                None => {
                    rows.insert(idx, row.to_vec());
                }
            }
        }
    }
    let indices = rows.keys().copied().collect();
    let values = rows.into_values().flatten().collect();
    SparseGradient::new(table, dim, indices, values)
}

/// `sum * scale / nodes`.
pub fn dequant_average<T: Real>(sums: &[i64], scale: Scale<T>, nodes: usize) -> Vec<T> {
    let n = T::from_usize_lossy(nodes);
    sums.iter()
        .map(|&s| T::from_i64(s).expect("i64 to float") * scale.get() / n)
        .collect()
}

/// FP32 allreduce: element-wise sum in rank order, divided by the node count.
pub fn mean_dense<T: Real>(parts: &[&[T]]) -> Result<Vec<T>> {
    let first = parts.first().ok_or(Error::EmptyTensor)?;
    let mut sum = first.to_vec();
    for p in &parts[1..] {
        if p.len() != sum.len() {
            return Err(Error::shape(sum.len(), p.len()));
        }
        sum.iter_mut().zip(p.iter()).for_each(|(a, &g)| *a += g);
    }
    let n = T::from_usize_lossy(parts.len());
    sum.iter_mut().for_each(|a| *a /= n);
    Ok(sum)
}
