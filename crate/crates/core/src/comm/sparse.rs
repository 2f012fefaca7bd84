use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Row-sparse gradient of one embedding table: strictly increasing row ids
/// and one `dim`-wide value row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient<T> {
    pub table: usize,
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Real> SparseGradient<T> {
    pub fn new(table: usize, dim: usize, indices: Vec<u32>, values: Vec<T>) -> Result<Self> {
        if values.len() != indices.len() * dim {
            return Err(Error::shape(indices.len() * dim, values.len()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Batch("sparse indices must be strictly increasing".into()));
        }
        Ok(SparseGradient {
            table,
            dim,
            indices,
            values,
        })
    }

    pub fn empty(table: usize, dim: usize) -> Self {
        SparseGradient {
            table,
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz_rows(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Scatters into a dense `rows x dim` matrix.
    pub fn to_dense(&self, rows: usize) -> Vec<T> {
        let mut dense = vec![T::zero(); rows * self.dim];
        for (k, &idx) in self.indices.iter().enumerate() {
            let idx = idx as usize;
            dense[idx * self.dim..(idx + 1) * self.dim].copy_from_slice(self.row(k));
        }
        dense
    }
}

/// Merges per-sample row gradients into a [`SparseGradient`]: indices are
/// sorted and de-duplicated, and rows sharing an index are summed in
/// arrival order.
pub fn coalesce_sparse<'a, T, I>(table: usize, dim: usize, contributions: I) -> SparseGradient<T>
where
    T: Real,
    I: IntoIterator<Item = (u32, &'a [T])>,
{
    let mut items: Vec<(u32, &'a [T])> = contributions.into_iter().collect();
    // stable: equal indices keep arrival order
    items.sort_by_key(|&(idx, _)| idx);
    let mut indices: Vec<u32> = Vec::new();
    let mut values: Vec<T> = Vec::with_capacity(items.len() * dim);
    for (idx, row) in items {
        debug_assert_eq!(row.len(), dim);
        if indices.last() == Some(&idx) {
            let start = values.len() - dim;
            for (acc, &g) in values[start..].iter_mut().zip(row) {
                *acc += g;
            }
        } else {
            indices.push(idx);
            values.extend_from_slice(row);
        }
    }
    SparseGradient {
        table,
        dim,
        indices,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicates_are_summed() {
        let g1 = [1.0f32, 2.0];
        let g2 = [0.5f32, -1.0];
        let s = coalesce_sparse(0, 2, [(3u32, &g1[..]), (3, &g2[..])]);
        assert_eq!(s.indices, vec![3]);
        assert_eq!(s.values, vec![1.5, 1.0]);
    }

    #[test]
    fn disjoint_indices_sorted() {
        let a = [1.0f32];
        let b = [2.0f32];
        let c = [3.0f32];
        let s = coalesce_sparse(1, 1, [(9u32, &a[..]), (2, &b[..]), (5, &c[..])]);
        assert_eq!(s.indices, vec![2, 5, 9]);
        assert_eq!(s.values, vec![2.0, 3.0, 1.0]);
        assert_eq!(s.table, 1);
    }

    #[test]
    fn scatter_matches_dense_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (rows, dim) = (30, 4);
        let idx: Vec<u32> = (0..200).map(|_| rng.random_range(0..rows as u32)).collect();
        let vals: Vec<f32> = (0..200 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut dense = vec![0.0f32; rows * dim];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..dim {
                dense[i as usize * dim + j] += vals[k * dim + j];
            }
        }
        let s = coalesce_sparse(
            0,
            dim,
            idx.iter().enumerate().map(|(k, &i)| (i, &vals[k * dim..(k + 1) * dim])),
        );
        assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.to_dense(rows), dense);
    }

    #[test]
    fn constructor_checks() {
        assert!(SparseGradient::new(0, 2, vec![1, 1], vec![0.0f32; 4]).is_err());
        assert!(SparseGradient::new(0, 2, vec![1], vec![0.0f32; 3]).is_err());
        assert!(SparseGradient::new(0, 2, vec![1, 4], vec![0.0f32; 4]).is_ok());
    }
}
