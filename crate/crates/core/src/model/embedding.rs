use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::comm::{coalesce_sparse, SparseGradient};
use crate::error::{Error, Result};
use crate::quantizer::{self, Bits, Scale};
use crate::real::Real;

/// Scale, width and integer codes of a quantized table.
pub type TableCodes<T> = (Scale<T>, Bits, Vec<i32>);

/// One embedding table: FP32 master rows plus the frozen per-table scale
/// used to fake-quantize rows on lookup.
///
/// Quantized values are never written back into `weights`; lookups gather
/// the referenced rows and quantize only those.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    rows: usize,
    dim: usize,
    pub(crate) weights: Vec<T>,
    bits: Option<Bits>,
    scale: Option<Scale<T>>,
    scale_iter: Option<u64>,
}

impl<T: Real> EmbeddingTable<T> {
    /// Uniform `(-1/sqrt(rows), 1/sqrt(rows))` initialisation.
    pub fn new<R: Rng>(rows: usize, dim: usize, bits: Option<Bits>, rng: &mut R) -> Self {
        let bound = 1.0 / num_traits::Float::sqrt(rows as f64);
        let weights = (0..rows * dim)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)).unwrap())
            .collect();
        Self::from_weights(rows, dim, weights, bits).expect("shape is consistent")
    }

    pub fn from_weights(rows: usize, dim: usize, weights: Vec<T>, bits: Option<Bits>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::EmptyTensor);
        }
        if weights.len() != rows * dim {
            return Err(Error::shape(rows * dim, weights.len()));
        }
        Ok(EmbeddingTable {
            rows,
            dim,
            weights,
            bits,
            scale: None,
            scale_iter: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn row(&self, index: usize) -> &[T] {
        &self.weights[index * self.dim..(index + 1) * self.dim]
    }

    pub fn bits(&self) -> Option<Bits> {
        self.bits
    }

    pub fn scale(&self) -> Option<Scale<T>> {
        self.scale
    }

    pub fn scale_iter(&self) -> Option<u64> {
        self.scale_iter
    }

    pub(crate) fn set_bits(&mut self, bits: Option<Bits>) {
        self.bits = bits;
        self.scale = None;
        self.scale_iter = None;
    }

    pub fn set_scale(&mut self, scale: Scale<T>, iter: u64) {
        self.scale = Some(scale);
        self.scale_iter = Some(iter);
    }

    /// Recomputes the scale over the whole table when `iter` starts a new
    /// period (or no scale exists yet). Returns whether it was recomputed.
    pub fn maybe_update_scale(&mut self, iter: u64, period: u32) -> Result<bool> {
        let Some(bits) = self.bits else {
            return Ok(false);
        };
        let due = match self.scale_iter {
            None => true,
            Some(last) if last == iter => false,
            Some(_) => iter.is_multiple_of(u64::from(period.max(1))),
        };
        if due {
            self.scale = Some(quantizer::compute_scale(&self.weights, bits)?);
            self.scale_iter = Some(iter);
        }
        Ok(due)
    }

    fn active_scale(&self) -> Result<Option<(Scale<T>, Bits)>> {
        match (self.bits, self.scale) {
            (None, _) => Ok(None),
            (Some(bits), Some(s)) => Ok(Some((s, bits))),
            (Some(bits), None) => Ok(Some((quantizer::compute_scale(&self.weights, bits)?, bits))),
        }
    }

    /// Fake-quantized copy of one row, as seen by the forward pass.
    pub fn effective_row(&self, index: usize) -> Result<Vec<T>> {
        let row = self.row(index);
        Ok(match self.active_scale()? {
            Some((s, bits)) => quantizer::fake_quantize(row, s, bits),
            None => row.to_vec(),
        })
    }

    /// Sum-pooled lookup. Only the referenced rows are fake-quantized.
    pub fn forward(&self, indices: &[u32], offsets: &[usize]) -> Result<Vec<T>> {
        let quant = self.active_scale()?;
        let samples = offsets.len().saturating_sub(1);
        let d = self.dim;
        let mut out = vec![T::zero(); samples * d];
        let mut row = vec![T::zero(); d];
        for b in 0..samples {
            let pooled = &mut out[b * d..(b + 1) * d];
            for (k, &idx) in indices[offsets[b]..offsets[b + 1]].iter().enumerate() {
                let idx = idx as usize;
                if idx >= self.rows {
                    return Err(Error::IndexOutOfRange {
                        index: idx as u64,
                        rows: self.rows,
                    });
                }
                let src = self.row(idx);
                match quant {
                    Some((s, bits)) => {
                        for (r, &w) in row.iter_mut().zip(src) {
                            *r = quantizer::fake_quantize_one(w, s, bits);
                        }
                    }
                    None => row.copy_from_slice(src),
                }
                if k == 0 {
                    pooled.copy_from_slice(&row);
                } else {
                    for (p, &r) in pooled.iter_mut().zip(&row) {
                        *p += r;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient w.r.t. the master rows given the gradient of the pooled
    /// output. The straight-through estimator makes this the same as the
    /// gradient w.r.t. the fake-quantized rows.
    pub fn backward(&self, table_id: usize, indices: &[u32], offsets: &[usize], d_pooled: &[T]) -> SparseGradient<T> {
        let d = self.dim;
        let samples = offsets.len().saturating_sub(1);
        let contributions = (0..samples).flat_map(|b| {
            indices[offsets[b]..offsets[b + 1]]
                .iter()
                .map(move |&idx| (idx, &d_pooled[b * d..(b + 1) * d]))
        });
        coalesce_sparse(table_id, d, contributions)
    }

    pub fn sgd_step_sparse(&mut self, grad: &SparseGradient<T>, lr: T) -> Result<()> {
        if grad.dim != self.dim {
            return Err(Error::shape(self.dim, grad.dim));
        }
        for (k, &idx) in grad.indices.iter().enumerate() {
            let idx = idx as usize;
            if idx >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: idx as u64,
                    rows: self.rows,
                });
            }
            let row = &mut self.weights[idx * self.dim..(idx + 1) * self.dim];
            for (w, &g) in row.iter_mut().zip(grad.row(k)) {
                *w -= lr * g;
            }
        }
        Ok(())
    }

    pub fn sgd_step_dense(&mut self, grad: &[T], lr: T) -> Result<()> {
        if grad.len() != self.weights.len() {
            return Err(Error::shape(self.weights.len(), grad.len()));
        }
        for (w, &g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
        Ok(())
    }

    /// Integer codes of the whole table under the current scale.
    pub fn codes(&self) -> Result<Option<TableCodes<T>>> {
        Ok(self
            .active_scale()?
            .map(|(s, bits)| (s, bits, quantizer::quantize(&self.weights, s, bits))))
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(rows: usize, dim: usize, bits: Option<Bits>, seed: u64) -> EmbeddingTable<f32> {
        EmbeddingTable::new(rows, dim, bits, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Quantize the whole table first, then gather and pool.
    fn full_table_oracle(t: &EmbeddingTable<f32>, indices: &[u32], offsets: &[usize]) -> Vec<f32> {
        let s = quantizer::compute_scale(t.weights(), t.bits().unwrap()).unwrap();
        let s = t.scale().unwrap_or(s);
        let q = quantizer::fake_quantize(t.weights(), s, t.bits().unwrap());
        let d = t.dim();
        let mut out = Vec::new();
        for b in 0..offsets.len() - 1 {
            let mut acc: Option<Vec<f32>> = None;
            for &i in &indices[offsets[b]..offsets[b + 1]] {
                let row = &q[i as usize * d..(i as usize + 1) * d];
                acc = Some(match acc {
                    None => row.to_vec(),
                    Some(a) => a.iter().zip(row).map(|(x, y)| x + y).collect(),
                });
            }
            out.extend(acc.unwrap_or_else(|| vec![0.0; d]));
        }
        out
    }

    #[test]
    fn init_bounds() {
        let t = table(100, 4, None, 0);
        assert!(t.weights().iter().all(|w| w.abs() < 0.1));
    }

    #[test]
    fn scale_update_schedule() {
        let mut t = table(50, 4, Some(Bits::INT4), 1);
        assert!(t.maybe_update_scale(0, 200).unwrap());
        let s0 = t.scale().unwrap();
        t.weights_mut()[0] = 5.0;
        assert!(!t.maybe_update_scale(149, 200).unwrap());
        assert!(!t.maybe_update_scale(150, 200).unwrap());
        assert_eq!(t.scale().unwrap().get().to_bits(), s0.get().to_bits());
        assert_eq!(t.scale_iter(), Some(0));
        assert!(t.maybe_update_scale(200, 200).unwrap());
        assert_eq!(t.scale().unwrap().get(), 5.0 / 7.0);
        assert_eq!(t.scale_iter(), Some(200));
    }

    #[test]
    fn period_one_tracks_oracle() {
        let mut t = table(30, 3, Some(Bits::INT8), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for iter in 0..20 {
            assert!(t.maybe_update_scale(iter, 1).unwrap());
            let oracle = quantizer::compute_scale(t.weights(), Bits::INT8).unwrap();
            assert_eq!(t.scale().unwrap(), oracle);
            let k = rng.random_range(0..90);
            t.weights_mut()[k] += rng.random_range(-0.5..0.5);
        }
    }

    #[test]
    fn float_table_never_quantizes() {
        let mut t = table(10, 2, None, 3);
        assert!(!t.maybe_update_scale(0, 1).unwrap());
        let out = t.forward(&[4], &[0, 1]).unwrap();
        assert_eq!(out, t.row(4));
    }

    #[test]
    fn single_index_is_fake_quantized_row() {
        let mut t = table(20, 8, Some(Bits::INT4), 4);
        t.maybe_update_scale(0, 10).unwrap();
        let out = t.forward(&[7, 3], &[0, 1, 2]).unwrap();
        let s = t.scale().unwrap();
        assert_eq!(&out[..8], quantizer::fake_quantize(t.row(7), s, Bits::INT4).as_slice());
        assert_eq!(&out[8..], quantizer::fake_quantize(t.row(3), s, Bits::INT4).as_slice());
    }

    #[test]
    fn two_index_bag_is_sum() {
        let mut t = table(20, 4, Some(Bits::INT4), 5);
        t.maybe_update_scale(0, 10).unwrap();
        let out = t.forward(&[2, 9], &[0, 2]).unwrap();
        let a = t.effective_row(2).unwrap();
        let b = t.effective_row(9).unwrap();
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(out, sum);
    }

    #[test]
    fn sparse_rows_match_full_table_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..25 {
            let rows = rng.random_range(1..60);
            let mut t = table(rows, rng.random_range(1..9), Some(Bits::INT4), case);
            t.maybe_update_scale(0, 5).unwrap();
            let b = rng.random_range(1..10);
            let mut offsets = vec![0];
            let mut indices = Vec::new();
            for _ in 0..b {
                for _ in 0..rng.random_range(1..4) {
                    indices.push(rng.random_range(0..rows as u32));
                }
                offsets.push(indices.len());
            }
            let out = t.forward(&indices, &offsets).unwrap();
            let oracle = full_table_oracle(&t, &indices, &offsets);
            assert_eq!(
                out.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                oracle.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn out_of_range_index() {
        let t = table(5, 2, None, 0);
        assert_eq!(
            t.forward(&[5], &[0, 1]),
            Err(Error::IndexOutOfRange { index: 5, rows: 5 })
        );
    }

    #[test]
    fn sparse_sgd_touches_only_listed_rows() {
        let mut t = table(6, 2, None, 7);
        let before = t.clone();
        let g = SparseGradient::new(0, 2, vec![3], vec![1.0, -1.0]).unwrap();
        t.sgd_step_sparse(&g, 0.5).unwrap();
        for r in 0..6 {
            if r == 3 {
                assert_eq!(t.row(3), &[before.row(3)[0] - 0.5, before.row(3)[1] + 0.5]);
            } else {
                assert_eq!(t.row(r), before.row(r));
            }
        }
        let mut z = before.clone();
        z.sgd_step_sparse(&g, 0.0).unwrap();
        assert_eq!(z, before);
    }

    #[test]
    fn sparse_step_equals_dense_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = table(40, 3, None, 8);
        let mut b = a.clone();
        let indices: Vec<u32> = (0..15).map(|_| rng.random_range(0..40)).collect();
        let offsets: Vec<usize> = (0..=15).collect();
        let d: Vec<f32> = (0..45).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = a.backward(0, &indices, &offsets, &d);
        let dense = g.to_dense(40);
        a.sgd_step_sparse(&g, 0.1).unwrap();
        b.sgd_step_dense(&dense, 0.1).unwrap();
        assert_eq!(a, b);
    }
}
