use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::quantizer::{self, Bits, Granularity, Scale};
use crate::real::Real;

/// Fully connected layer with row-major `out x in` weights and QAT state.
///
/// `scales` holds one scale per output channel (channel-wise) or a single
/// scale (matrix-wise); it is empty until the first refresh.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub relu: bool,
    pub(crate) scales: Vec<Scale<T>>,
}

impl<T: Real> DenseLayer<T> {
    /// Zero-mean normal weights with std `sqrt(2 / (in + out))`, zero bias.
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, relu: bool, rng: &mut R) -> Self {
        let std = num_traits::Float::sqrt(2.0 / (in_dim + out_dim) as f64);
        let normal = Normal::new(0.0, std).expect("finite std");
        let weight = (0..in_dim * out_dim)
            .map(|_| T::from_f64(normal.sample(rng)).unwrap())
            .collect();
        DenseLayer {
            in_dim,
            out_dim,
            weight,
            bias: vec![T::zero(); out_dim],
            relu,
            scales: Vec::new(),
        }
    }

    pub fn scales(&self) -> &[Scale<T>] {
        &self.scales
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn compute_scales(&self, bits: Bits, granularity: Granularity) -> Result<Vec<Scale<T>>> {
        match granularity {
            Granularity::PerChannel => quantizer::per_channel_scales(&self.weight, self.out_dim, self.in_dim, bits),
            Granularity::PerTensor | Granularity::PerTable => Ok(vec![quantizer::compute_scale(&self.weight, bits)?]),
        }
    }

    pub(crate) fn refresh_scales(&mut self, bits: Bits, granularity: Granularity) -> Result<()> {
        self.scales = self.compute_scales(bits, granularity)?;
        Ok(())
    }

    pub(crate) fn clear_scales(&mut self) {
        self.scales.clear();
    }

    fn scale_for(scales: &[Scale<T>], row: usize) -> Scale<T> {
        if scales.len() == 1 {
            scales[0]
        } else {
            scales[row]
        }
    }

    /// Weight matrix used by the forward pass: fake-quantized with the
    /// stored scales, or the master weights when `quant` is `None`.
    pub fn effective_weight(&self, quant: Option<(Bits, Granularity)>) -> Result<Vec<T>> {
        let Some((bits, granularity)) = quant else {
            return Ok(self.weight.clone());
        };
        let computed;
        let scales = if self.scales.is_empty() {
            computed = self.compute_scales(bits, granularity)?;
            &computed
        } else {
            &self.scales
        };
        let mut w = self.weight.clone();
        for (o, row) in w.chunks_exact_mut(self.in_dim).enumerate() {
            quantizer::fake_quantize_in_place(row, Self::scale_for(scales, o), bits);
        }
        Ok(w)
    }

    /// Integer weight codes and their scales under the current state.
    pub fn codes(&self, bits: Bits, granularity: Granularity) -> Result<(Vec<Scale<T>>, Vec<i32>)> {
        let scales = if self.scales.is_empty() {
            self.compute_scales(bits, granularity)?
        } else {
            self.scales.clone()
        };
        let mut codes = Vec::with_capacity(self.weight.len());
        for (o, row) in self.weight.chunks_exact(self.in_dim).enumerate() {
            codes.extend(quantizer::quantize(row, Self::scale_for(&scales, o), bits));
        }
        Ok((scales, codes))
    }

    pub fn sgd_step_dense(&mut self, weight_grad: &[T], bias_grad: &[T], lr: T) -> Result<()> {
        if weight_grad.len() != self.weight.len() {
            return Err(Error::shape(self.weight.len(), weight_grad.len()));
        }
        if bias_grad.len() != self.bias.len() {
            return Err(Error::shape(self.bias.len(), bias_grad.len()));
        }
        for (w, &g) in self.weight.iter_mut().zip(weight_grad) {
            *w -= lr * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(bias_grad) {
            *b -= lr * g;
        }
        Ok(())
    }
}

/// Borrowed view of a layer as the forward kernels need it.
pub(crate) struct LayerView<'a, T> {
    pub weight: &'a [T],
    pub bias: &'a [T],
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
}

/// Values kept from the forward pass of one layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache<T> {
    pub input: Vec<T>,
    pub pre: Vec<T>,
    pub weight: Vec<T>,
}

/// `x W^T + b` for a row-major `batch x in` input.
pub(crate) fn linear_forward<T: Real>(x: &[T], batch: usize, layer: &LayerView<'_, T>) -> Vec<T> {
    let (n_in, n_out) = (layer.in_dim, layer.out_dim);
    let mut y = Vec::with_capacity(batch * n_out);
    for b in 0..batch {
        let xb = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let wo = &layer.weight[o * n_in..(o + 1) * n_in];
            let mut acc = layer.bias[o];
            for (&w, &xi) in wo.iter().zip(xb) {
                acc += w * xi;
            }
            y.push(acc);
        }
    }
    y
}

/// Runs a stack of layers. Hidden activations are optionally
/// fake-quantized with a per-batch max-abs scale; the straight-through
/// estimator applies in backward.
pub(crate) fn mlp_forward<T: Real>(
    mut x: Vec<T>,
    batch: usize,
    layers: &[LayerView<'_, T>],
    act_bits: Option<Bits>,
    mut cache: Option<&mut Vec<LayerCache<T>>>,
) -> Result<Vec<T>> {
    for layer in layers {
        let pre = linear_forward(&x, batch, layer);
        let mut out = pre.clone();
        if layer.relu {
            for v in &mut out {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            if let Some(bits) = act_bits {
                if !out.is_empty() {
                    let s = quantizer::compute_scale(&out, bits)?;
                    quantizer::fake_quantize_in_place(&mut out, s, bits);
                }
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.push(LayerCache {
                input: core::mem::take(&mut x),
                pre,
                weight: layer.weight.to_vec(),
            });
        }
        x = out;
    }
    Ok(x)
}

/// Gradients of one layer plus the gradient flowing to its input.
pub(crate) fn layer_backward<T: Real>(
    cache: &LayerCache<T>,
    mut d_out: Vec<T>,
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    relu: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    if relu {
        for (g, &p) in d_out.iter_mut().zip(&cache.pre) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
    }
    let mut dw = vec![T::zero(); out_dim * in_dim];
    let mut db = vec![T::zero(); out_dim];
    let mut dx = vec![T::zero(); batch * in_dim];
    for b in 0..batch {
        let xb = &cache.input[b * in_dim..(b + 1) * in_dim];
        let gb = &d_out[b * out_dim..(b + 1) * out_dim];
        let dxb = &mut dx[b * in_dim..(b + 1) * in_dim];
        for (o, &g) in gb.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            db[o] += g;
            let row = o * in_dim;
            for i in 0..in_dim {
                dw[row + i] += g * xb[i];
                dxb[i] += g * cache.weight[row + i];
            }
        }
    }
    (dx, dw, db)
}
