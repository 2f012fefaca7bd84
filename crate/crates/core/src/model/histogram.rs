//! Equal-width weight histograms over a caller-chosen range.

use alloc::vec;
use alloc::vec::Vec;

use super::EmbeddingTable;
use crate::error::{Error, Result};
use crate::quantizer;
use crate::real::Real;

/// `bins + 1` edges; bin `i` covers `[edges[i], edges[i + 1])`.
pub fn histogram_edges(bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..=bins)
        .map(|i| {
            if i == bins {
                hi
            } else {
                lo + (hi - lo) * i as f64 / bins as f64
            }
        })
        .collect()
}

/// Counts per bin; values outside `[lo, hi)` land in the end bins.
pub fn weight_histogram<T: Real>(values: &[T], bins: usize, lo: f64, hi: f64) -> Result<Vec<u64>> {
    if bins == 0 || !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(Error::Config("histogram needs bins > 0 and a finite lo < hi".into()));
    }
    let edges = histogram_edges(bins, lo, hi);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let v = v.to_f64_lossy();
        if v.is_nan() {
            return Err(Error::NonFinite);
        }
        let mut i = num_traits::Float::floor((v - lo) / width).clamp(0.0, (bins - 1) as f64) as usize;
        // settle rounding at the edges so the bin always satisfies the edge test
        while i > 0 && v < edges[i] {
            i -= 1;
        }
        while i + 1 < bins && v >= edges[i + 1] {
            i += 1;
        }
        counts[i] += 1;
    }
    Ok(counts)
}

impl<T: Real> EmbeddingTable<T> {
    /// Histograms of the master weights and of their fake-quantized view.
    pub fn histograms(&self, bins: usize, lo: f64, hi: f64) -> Result<(Vec<u64>, Vec<u64>)> {
        let master = weight_histogram(self.weights(), bins, lo, hi)?;
        let quantized = match self.codes()? {
            Some((scale, _, codes)) => weight_histogram(&quantizer::dequantize(&codes, scale), bins, lo, hi)?,
            None => master.clone(),
        };
        Ok((master, quantized))
    }
}
