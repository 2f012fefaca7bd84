//! Pairwise dot-product feature interaction.
//!
//! With `k` feature vectors (bottom-MLP output first, then one pooled
//! embedding per table) the output row is the bottom output followed by
//! the dots of every pair `i > j`, enumerated row-major:
//! `(1,0), (2,0), (2,1), (3,0), ...`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

pub fn output_dim(dim: usize, features: usize) -> usize {
    dim + features * (features - 1) / 2
}

/// `dense` is `batch x dim`; each entry of `embs` is `batch x dim`.
pub fn interact<T: Real>(dense: &[T], embs: &[Vec<T>], batch: usize, dim: usize) -> Vec<T> {
    let k = embs.len() + 1;
    let width = output_dim(dim, k);
    let mut out = Vec::with_capacity(batch * width);
    let mut feats: Vec<&[T]> = Vec::with_capacity(k);
    for b in 0..batch {
        feats.clear();
        let z = &dense[b * dim..(b + 1) * dim];
        feats.push(z);
        feats.extend(embs.iter().map(|e| &e[b * dim..(b + 1) * dim]));
        out.extend_from_slice(z);
        for i in 1..k {
            for j in 0..i {
                out.push(dot(feats[i], feats[j]));
            }
        }
    }
    out
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Returns `(d_dense, d_embs)` given the gradient of the interaction output.
pub fn interact_backward<T: Real>(
    dense: &[T],
    embs: &[Vec<T>],
    d_out: &[T],
    batch: usize,
    dim: usize,
) -> (Vec<T>, Vec<Vec<T>>) {
    let k = embs.len() + 1;
    let width = output_dim(dim, k);
    let mut d_feats: Vec<Vec<T>> = (0..k).map(|_| vec![T::zero(); batch * dim]).collect();
    for b in 0..batch {
        let g = &d_out[b * width..(b + 1) * width];
        let feat = |i: usize| -> &[T] {
            if i == 0 {
                &dense[b * dim..(b + 1) * dim]
            } else {
                &embs[i - 1][b * dim..(b + 1) * dim]
            }
        };
        for (acc, &gz) in d_feats[0][b * dim..(b + 1) * dim].iter_mut().zip(&g[..dim]) {
            *acc += gz;
        }
        let mut p = dim;
        for i in 1..k {
            for j in 0..i {
                let gp = g[p];
                p += 1;
                if gp == T::zero() {
                    continue;
                }
                let (fi, fj) = (feat(i), feat(j));
                for t in 0..dim {
                    d_feats[i][b * dim + t] += gp * fj[t];
                    d_feats[j][b * dim + t] += gp * fi[t];
                }
            }
        }
    }
    let d_dense = d_feats.remove(0);
    (d_dense, d_feats)
}
