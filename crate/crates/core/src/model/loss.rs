//! Sigmoid + binary cross-entropy on raw logits.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Probability clamp inside the log.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp_portable())
    } else {
        let e = x.exp_portable();
        e / (T::one() + e)
    }
}

/// Per-sample loss with the probability clamped to `[eps, 1 - eps]`.
pub fn bce<T: Real>(logit: T, label: T) -> T {
    let eps = T::from_f64(PROB_EPS).unwrap();
    let p = sigmoid(logit).max(eps).min(T::one() - eps);
    -(label * p.ln_portable() + (T::one() - label) * (T::one() - p).ln_portable())
}

/// Mean loss over the batch and `dL/dlogit = (sigmoid(x) - y) / B`.
pub fn bce_with_grad<T: Real>(logits: &[T], labels: &[f32]) -> Result<(T, Vec<T>)> {
    if logits.len() != labels.len() {
        return Err(Error::shape(labels.len(), logits.len()));
    }
    if logits.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let n = T::from_usize_lossy(logits.len());
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        if !x.is_finite() {
            return Err(Error::Diverged);
        }
        let y = T::from_f32_exact(y);
        total += bce(x, y);
        grad.push((sigmoid(x) - y) / n);
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::Diverged);
    }
    Ok((loss, grad))
}
