use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Per-node quantization residuals: one tensor per MLP gradient tensor and,
/// when error compensation covers embeddings, one dense buffer per table.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBuffer<T> {
    pub mlp: Vec<Vec<T>>,
    pub tables: Vec<Vec<T>>,
}

impl<T: Real> ErrorBuffer<T> {
    pub fn zeros(mlp_shapes: &[usize], table_shapes: &[usize]) -> Self {
        ErrorBuffer {
            mlp: mlp_shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            tables: table_shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mlp
            .iter()
            .chain(&self.tables)
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// `grad + residual`.
pub fn ec_correct<T: Real>(grad: &[T], residual: &[T]) -> Result<Vec<T>> {
    if grad.len() != residual.len() {
        return Err(Error::shape(residual.len(), grad.len()));
    }
    Ok(grad.iter().zip(residual).map(|(&g, &r)| g + r).collect())
}

/// `residual <- corrected - transmitted`, where `transmitted` is the
/// dequantized value that actually went on the wire.
pub fn ec_update<T: Real>(corrected: &[T], transmitted: &[T], residual: &mut [T]) -> Result<()> {
    if corrected.len() != residual.len() {
        return Err(Error::shape(residual.len(), corrected.len()));
    }
    if transmitted.len() != residual.len() {
        return Err(Error::shape(residual.len(), transmitted.len()));
    }
    for ((r, &c), &t) in residual.iter_mut().zip(corrected).zip(transmitted) {
        *r = c - t;
    }
    Ok(())
}
