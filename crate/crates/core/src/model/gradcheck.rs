//! Central finite-difference check of the analytic backward pass.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss, Dlrm, ForwardCache, TableGrad};
use crate::data::Batch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Parameters sampled from each MLP tensor and each table.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            samples_per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Parameters skipped because even a step of `step / 100` moved some
    /// ReLU input across zero, where the loss is not differentiable.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

/// Relative error with a small absolute floor so that exact zeros compare
/// against finite-difference round-off rather than against zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy)]
enum Param {
    Mlp(usize, usize),
    Table(usize, usize),
}

impl Dlrm<f64> {
    fn loss_and_pattern(&self, batch: &Batch) -> Result<(f64, Vec<bool>)> {
        let (logits, cache) = self.run(batch, true)?;
        let cache: ForwardCache<f64> = cache.expect("cache requested");
        let (l, _) = loss::bce_with_grad(&logits, &batch.labels)?;
        let pattern = self
            .bottom
            .iter()
            .zip(&cache.bottom)
            .chain(self.top.iter().zip(&cache.top))
            .filter(|(layer, _)| layer.relu)
            .flat_map(|(_, c)| c.pre.iter().map(|&v| v > 0.0))
            .collect();
        Ok((l, pattern))
    }

    fn param(&self, p: Param) -> f64 {
        match p {
            Param::Mlp(k, i) => self.mlp_tensors()[k][i],
            Param::Table(t, i) => self.tables[t].weights()[i],
        }
    }

    fn set_param(&mut self, p: Param, v: f64) {
        match p {
            Param::Mlp(k, i) => self.mlp_tensors_mut()[k][i] = v,
            Param::Table(t, i) => self.table_weights_mut(t)[i] = v,
        }
    }

    /// Compares analytic gradients with central differences on a random
    /// sample of parameters. Quantization must be off.
    pub fn check_gradients(&self, batch: &Batch, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        if self.mlp_quant().is_some() || self.tables.iter().any(|t| t.bits().is_some()) {
            return Err(Error::Config("gradient check needs quantization bypassed".into()));
        }
        batch.validate(&self.config.table_rows)?;
        let cache = self.run(batch, true)?.1.expect("cache requested");
        let (_, grads) = self.loss_and_backward(batch, &cache)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params: Vec<(Param, f64)> = Vec::new();
        for (k, g) in grads.mlp_tensors().into_iter().enumerate() {
            for _ in 0..cfg.samples_per_tensor.min(g.len()) {
                let i = rng.random_range(0..g.len());
                params.push((Param::Mlp(k, i), g[i]));
            }
        }
        let d = self.config.embed_dim;
        for (t, g) in grads.tables.iter().enumerate() {
            let rows = self.tables[t].rows();
            let dense = match g {
                TableGrad::Sparse(s) => s.to_dense(rows),
                TableGrad::Dense(v) => v.clone(),
            };
            let used = &batch.indices[t];
            for n in 0..cfg.samples_per_tensor {
                // mostly referenced rows, sometimes any row (gradient zero)
                let row = if n % 4 != 3 && !used.is_empty() {
                    used[rng.random_range(0..used.len())] as usize
                } else {
                    rng.random_range(0..rows)
                };
                let i = row * d + rng.random_range(0..d);
                params.push((Param::Table(t, i), dense[i]));
            }
        }

        let mut probe = self.clone();
        let (_, base_pattern) = probe.loss_and_pattern(batch)?;
        let mut report = GradCheckReport::default();
        'params: for (p, analytic) in params {
            let orig = probe.param(p);
            // shrink the step when it crosses a kink; give up after three tries
            let mut h = cfg.step;
            for _ in 0..3 {
                probe.set_param(p, orig + h);
                let (up, up_pattern) = probe.loss_and_pattern(batch)?;
                probe.set_param(p, orig - h);
                let (down, down_pattern) = probe.loss_and_pattern(batch)?;
                probe.set_param(p, orig);
                if up_pattern == base_pattern && down_pattern == base_pattern {
                    let numeric = (up - down) / (2.0 * h);
                    report.checked += 1;
                    report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
                    continue 'params;
                }
                h /= 10.0;
            }
            report.skipped_kinks += 1;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_batch, tiny_config};
    use super::*;

    #[test]
    fn tiny_model_passes() {
        let cfg = tiny_config(32);
        let m = Dlrm::<f64>::new(cfg.clone(), 2).unwrap();
        let r = m
            .check_gradients(&tiny_batch(&cfg, 6, 1), &GradCheckConfig::default())
            .unwrap();
        assert!(r.checked > 40);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn refuses_quantized_model() {
        let cfg = tiny_config(4);
        let m = Dlrm::<f64>::new(cfg.clone(), 2).unwrap();
        assert!(m
            .check_gradients(&tiny_batch(&cfg, 4, 1), &GradCheckConfig::default())
            .is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(0.0, 1e-12) < 1e-3);
    }
}
