//! DLRM-shaped click-through-rate model with quantization-aware training.
//!
//! Forward: dense features go through the bottom MLP; every categorical
//! feature is looked up in its own embedding table (sum-pooled bag); the
//! bottom output and pooled embeddings meet in a pairwise dot-product
//! interaction; the top MLP maps that to one logit per sample.
//!
//! QAT keeps FP32 master weights and fake-quantizes on the fly: embedding
//! rows with one scale per table, MLP weights with one scale per output
//! channel (or per matrix). Scales are recomputed only every
//! `update_period` iterations and stay frozen in between.

mod embedding;
mod frozen;
pub mod gradcheck;
mod histogram;
pub mod interaction;
pub mod loss;
mod mlp;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use embedding::{EmbeddingTable, TableCodes};
pub use frozen::{FrozenDlrm, FrozenLayer, FrozenTable, StoredTensor};
pub use histogram::{histogram_edges, weight_histogram};
pub use mlp::DenseLayer;

use crate::comm::SparseGradient;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::quantizer::{Bits, Granularity};
use crate::real::Real;
use mlp::{layer_backward, mlp_forward, LayerCache, LayerView};

/// Width of "no quantization" in bit-width config fields.
pub const FLOAT_BITS: u32 = 32;

/// Criteo Kaggle categorical cardinalities (26 tables, 33,762,577 rows).
pub const KAGGLE_TABLE_ROWS: [usize; 26] = [
    1460, 583, 10_131_227, 2_202_608, 305, 24, 12_517, 633, 3, 93_145, 5683, 8_351_593, 3194, 27, 14_992, 5_461_306,
    10, 5652, 2173, 4, 7_046_547, 18, 15, 286_181, 105, 142_572,
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dense_in: usize,
    pub table_rows: Vec<usize>,
    pub embed_dim: usize,
    /// Layer widths including the input (`dense_in`) and output (`embed_dim`).
    pub bottom_arch: Vec<usize>,
    /// Layer widths after the interaction, ending in 1.
    pub top_arch: Vec<usize>,
    /// 2, 4, 8, 16, or 32 for no quantization.
    pub emb_bits: u32,
    pub mlp_bits: u32,
    /// `PerChannel` or `PerTensor` (matrix-wise).
    pub mlp_granularity: Granularity,
    pub update_period: u32,
    pub learning_rate: f32,
    pub quantize_activations: bool,
    /// Epochs trained unquantized before QAT starts; 0 means QAT from scratch.
    pub pretrain_epochs: u32,
}

impl ModelConfig {
    /// Kaggle architecture: 13-512-256-64-16 bottom, 512-256-1 top, d = 16.
    pub fn kaggle() -> Self {
        ModelConfig {
            dense_in: 13,
            table_rows: KAGGLE_TABLE_ROWS.to_vec(),
            embed_dim: 16,
            bottom_arch: vec![13, 512, 256, 64, 16],
            top_arch: vec![512, 256, 1],
            emb_bits: 4,
            mlp_bits: 4,
            mlp_granularity: Granularity::PerChannel,
            update_period: 200,
            learning_rate: 0.1,
            quantize_activations: false,
            pretrain_epochs: 0,
        }
    }

    pub fn num_tables(&self) -> usize {
        self.table_rows.len()
    }

    /// `d + k(k-1)/2` with `k = tables + 1`.
    pub fn top_input_dim(&self) -> usize {
        interaction::output_dim(self.embed_dim, self.num_tables() + 1)
    }

    pub fn emb_quant(&self) -> Result<Option<Bits>> {
        Bits::from_config(self.emb_bits)
    }

    pub fn mlp_quant(&self) -> Result<Option<(Bits, Granularity)>> {
        Ok(Bits::from_config(self.mlp_bits)?.map(|b| (b, self.mlp_granularity)))
    }

    fn layer_shapes(arch: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
        arch.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn bottom_shapes(&self) -> Vec<(usize, usize)> {
        Self::layer_shapes(&self.bottom_arch).collect()
    }

    pub fn top_shapes(&self) -> Vec<(usize, usize)> {
        let mut arch = vec![self.top_input_dim()];
        arch.extend_from_slice(&self.top_arch);
        Self::layer_shapes(&arch).collect()
    }

    /// Weights plus biases of both MLPs.
    pub fn mlp_parameter_count(&self) -> usize {
        self.bottom_shapes()
            .into_iter()
            .chain(self.top_shapes())
            .map(|(i, o)| i * o + o)
            .sum()
    }

    pub fn embedding_parameter_count(&self) -> u64 {
        self.table_rows.iter().map(|&r| r as u64).sum::<u64>() * self.embed_dim as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.dense_in == 0 || self.embed_dim == 0 {
            return bad("dense_in and embed_dim must be positive".into());
        }
        if self.table_rows.is_empty() || self.table_rows.contains(&0) {
            return bad("every table needs at least one row".into());
        }
        if self.table_rows.iter().any(|&r| r > u32::MAX as usize) {
            return bad("table rows must fit in u32".into());
        }
        if self.bottom_arch.len() < 2
            || self.bottom_arch[0] != self.dense_in
            || *self.bottom_arch.last().unwrap() != self.embed_dim
        {
            return bad(format!(
                "bottom arch {:?} must run from {} to embed_dim {}",
                self.bottom_arch, self.dense_in, self.embed_dim
            ));
        }
        if self.top_arch.last() != Some(&1) {
            return bad(format!("top arch {:?} must end in 1", self.top_arch));
        }
        if self.bottom_arch.contains(&0) || self.top_arch.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.update_period == 0 {
            return bad("update period must be >= 1".into());
        }
        if self.mlp_granularity == Granularity::PerTable {
            return bad("MLP granularity must be per-channel or per-tensor".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and >= 0".into());
        }
        self.emb_quant()?;
        self.mlp_quant()?;
        Ok(())
    }
}

/// Which scales were recomputed at the start of an iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScaleUpdate {
    pub tables: usize,
    pub mlp: bool,
}

impl ScaleUpdate {
    pub fn any(&self) -> bool {
        self.tables > 0 || self.mlp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TableGrad<T> {
    Sparse(SparseGradient<T>),
    Dense(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub bottom: Vec<LayerGrad<T>>,
    pub top: Vec<LayerGrad<T>>,
    pub tables: Vec<TableGrad<T>>,
}

impl<T: Real> Gradients<T> {
    /// MLP gradient tensors in canonical order: bottom then top, weight then bias.
    pub fn mlp_tensors(&self) -> Vec<&[T]> {
        self.bottom
            .iter()
            .chain(&self.top)
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn mlp_tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.bottom
            .iter_mut()
            .chain(self.top.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    bottom: Vec<LayerCache<T>>,
    top: Vec<LayerCache<T>>,
    dense_out: Vec<T>,
    embs: Vec<Vec<T>>,
    logits: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn logits(&self) -> &[T] {
        &self.logits
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport<T> {
    pub loss: T,
    pub scale_update: ScaleUpdate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dlrm<T> {
    config: ModelConfig,
    tables: Vec<EmbeddingTable<T>>,
    bottom: Vec<DenseLayer<T>>,
    top: Vec<DenseLayer<T>>,
    quantization_enabled: bool,
    mlp_scale_iter: Option<u64>,
}

fn views<'a, T: Real>(layers: &'a [DenseLayer<T>], weights: &'a [Vec<T>]) -> Vec<LayerView<'a, T>> {
    layers
        .iter()
        .zip(weights)
        .map(|(l, w)| LayerView {
            weight: w,
            bias: &l.bias,
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            relu: l.relu,
        })
        .collect()
}

impl<T: Real> Dlrm<T> {
    /// Randomly initialised model. QAT is active from the start unless
    /// `pretrain_epochs > 0`, in which case callers enable it later with
    /// [`Dlrm::set_quantization_enabled`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_bits = config.emb_quant()?;
        let tables = config
            .table_rows
            .iter()
            .map(|&rows| EmbeddingTable::new(rows, config.embed_dim, emb_bits, &mut rng))
            .collect();
        let bottom = config
            .bottom_shapes()
            .into_iter()
            .map(|(i, o)| DenseLayer::new(i, o, true, &mut rng))
            .collect();
        let top_shapes = config.top_shapes();
        let last = top_shapes.len() - 1;
        let top = top_shapes
            .into_iter()
            .enumerate()
            .map(|(k, (i, o))| DenseLayer::new(i, o, k != last, &mut rng))
            .collect();
        let mut model = Dlrm {
            quantization_enabled: true,
            config,
            tables,
            bottom,
            top,
            mlp_scale_iter: None,
        };
        if model.config.pretrain_epochs > 0 {
            model.set_quantization_enabled(false);
        }
        Ok(model)
    }

    /// Assembles a model from existing parts (used by import and tests).
    pub fn from_parts(
        config: ModelConfig,
        tables: Vec<EmbeddingTable<T>>,
        bottom: Vec<DenseLayer<T>>,
        top: Vec<DenseLayer<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let shapes_ok = tables.len() == config.num_tables()
            && tables
                .iter()
                .zip(&config.table_rows)
                .all(|(t, &r)| t.rows() == r && t.dim() == config.embed_dim)
            && bottom.iter().map(|l| (l.in_dim, l.out_dim)).eq(config.bottom_shapes())
            && top.iter().map(|l| (l.in_dim, l.out_dim)).eq(config.top_shapes());
        if !shapes_ok {
            return Err(Error::Config("parts do not match the model config".into()));
        }
        Ok(Dlrm {
            config,
            tables,
            bottom,
            top,
            quantization_enabled: true,
            mlp_scale_iter: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tables(&self) -> &[EmbeddingTable<T>] {
        &self.tables
    }

    pub fn bottom(&self) -> &[DenseLayer<T>] {
        &self.bottom
    }

    pub fn top(&self) -> &[DenseLayer<T>] {
        &self.top
    }

    pub fn learning_rate(&self) -> T {
        T::from_f32_exact(self.config.learning_rate)
    }

    pub fn quantization_enabled(&self) -> bool {
        self.quantization_enabled
    }

    /// Switches fake quantization on or off. Scales are recomputed on the
    /// next forward pass either way.
    pub fn set_quantization_enabled(&mut self, enabled: bool) {
        self.quantization_enabled = enabled;
        let bits = if enabled {
            self.config.emb_quant().ok().flatten()
        } else {
            None
        };
        for t in &mut self.tables {
            t.set_bits(bits);
        }
        for l in self.bottom.iter_mut().chain(self.top.iter_mut()) {
            l.clear_scales();
        }
        self.mlp_scale_iter = None;
    }

    fn mlp_quant(&self) -> Option<(Bits, Granularity)> {
        if self.quantization_enabled {
            self.config.mlp_quant().ok().flatten()
        } else {
            None
        }
    }

    fn act_bits(&self) -> Option<Bits> {
        if self.config.quantize_activations {
            self.mlp_quant().map(|(b, _)| b)
        } else {
            None
        }
    }

    /// Periodic scale refresh for every table and MLP layer.
    pub fn refresh_scales(&mut self, iter: u64) -> Result<ScaleUpdate> {
        let period = self.config.update_period;
        let mut update = ScaleUpdate::default();
        for t in &mut self.tables {
            if t.maybe_update_scale(iter, period)? {
                update.tables += 1;
            }
        }
        if let Some((bits, granularity)) = self.mlp_quant() {
            let due = match self.mlp_scale_iter {
                None => true,
                Some(last) if last == iter => false,
                Some(_) => iter.is_multiple_of(u64::from(period)),
            };
            if due {
                for l in self.bottom.iter_mut().chain(self.top.iter_mut()) {
                    l.refresh_scales(bits, granularity)?;
                }
                self.mlp_scale_iter = Some(iter);
                update.mlp = true;
            }
        }
        Ok(update)
    }

    fn run(&self, batch: &Batch, keep: bool) -> Result<(Vec<T>, Option<ForwardCache<T>>)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Batch("empty batch".into()));
        }
        if batch.dense_features != self.config.dense_in {
            return Err(Error::shape(self.config.dense_in, batch.dense_features));
        }
        if batch.num_tables() != self.tables.len() {
            return Err(Error::shape(self.tables.len(), batch.num_tables()));
        }
        let quant = self.mlp_quant();
        let act_bits = self.act_bits();
        let x: Vec<T> = batch.dense.iter().map(|&v| T::from_f32_exact(v)).collect();

        let bottom_w = self
            .bottom
            .iter()
            .map(|l| l.effective_weight(quant))
            .collect::<Result<Vec<_>>>()?;
        let mut bottom_cache = Vec::new();
        let z = mlp_forward(
            x,
            n,
            &views(&self.bottom, &bottom_w),
            act_bits,
            keep.then_some(&mut bottom_cache),
        )?;

        let embs = self
            .tables
            .iter()
            .enumerate()
            .map(|(t, table)| table.forward(&batch.indices[t], &batch.offsets[t]))
            .collect::<Result<Vec<_>>>()?;
        let inter = interaction::interact(&z, &embs, n, self.config.embed_dim);

        let top_w = self
            .top
            .iter()
            .map(|l| l.effective_weight(quant))
            .collect::<Result<Vec<_>>>()?;
        let mut top_cache = Vec::new();
        let logits = mlp_forward(
            inter,
            n,
            &views(&self.top, &top_w),
            act_bits,
            keep.then_some(&mut top_cache),
        )?;
        let cache = keep.then(|| ForwardCache {
            bottom: bottom_cache,
            top: top_cache,
            dense_out: z,
            embs,
            logits: logits.clone(),
        });
        Ok((logits, cache))
    }

    /// Training forward pass: refreshes scales when due, then runs the
    /// network keeping what backward needs.
    pub fn forward_train(&mut self, batch: &Batch, iter: u64) -> Result<(ForwardCache<T>, ScaleUpdate)> {
        batch.validate(&self.config.table_rows)?;
        let update = self.refresh_scales(iter)?;
        let (_, cache) = self.run(batch, true)?;
        Ok((cache.expect("cache requested"), update))
    }

    /// Logits for `batch` at iteration `iter` (scale refresh included).
    pub fn forward(&mut self, batch: &Batch, iter: u64) -> Result<Vec<T>> {
        batch.validate(&self.config.table_rows)?;
        self.refresh_scales(iter)?;
        Ok(self.run(batch, false)?.0)
    }

    /// Logits with the current frozen scales; never mutates the model.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<T>> {
        batch.validate(&self.config.table_rows)?;
        Ok(self.run(batch, false)?.0)
    }

    /// Mean BCE loss and gradients of every parameter. Embedding gradients
    /// are row-sparse with one row per unique referenced index.
    pub fn loss_and_backward(&self, batch: &Batch, cache: &ForwardCache<T>) -> Result<(T, Gradients<T>)> {
        let n = batch.len();
        let d = self.config.embed_dim;
        let (loss, d_logits) = loss::bce_with_grad(&cache.logits, &batch.labels)?;

        let mut top = Vec::with_capacity(self.top.len());
        let mut grad = d_logits;
        for (layer, lc) in self.top.iter().zip(&cache.top).rev() {
            let (dx, dw, db) = layer_backward(lc, grad, n, layer.in_dim, layer.out_dim, layer.relu);
            top.push(LayerGrad { weight: dw, bias: db });
            grad = dx;
        }
        top.reverse();

        let (dz, d_embs) = interaction::interact_backward(&cache.dense_out, &cache.embs, &grad, n, d);

        let mut bottom = Vec::with_capacity(self.bottom.len());
        let mut grad = dz;
        for (layer, lc) in self.bottom.iter().zip(&cache.bottom).rev() {
            let (dx, dw, db) = layer_backward(lc, grad, n, layer.in_dim, layer.out_dim, layer.relu);
            bottom.push(LayerGrad { weight: dw, bias: db });
            grad = dx;
        }
        bottom.reverse();

        let tables = self
            .tables
            .iter()
            .enumerate()
            .map(|(t, table)| TableGrad::Sparse(table.backward(t, &batch.indices[t], &batch.offsets[t], &d_embs[t])))
            .collect();
        Ok((loss, Gradients { bottom, top, tables }))
    }

    /// Forward + backward at iteration `iter` without updating weights.
    pub fn compute_gradients(&mut self, batch: &Batch, iter: u64) -> Result<(T, Gradients<T>, ScaleUpdate)> {
        let (cache, update) = self.forward_train(batch, iter)?;
        let (loss, grads) = self.loss_and_backward(batch, &cache)?;
        Ok((loss, grads, update))
    }

    /// Plain SGD on every parameter; sparse table gradients touch only
    /// their rows.
    pub fn apply_gradients(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        if grads.bottom.len() != self.bottom.len()
            || grads.top.len() != self.top.len()
            || grads.tables.len() != self.tables.len()
        {
            return Err(Error::Config("gradient structure does not match model".into()));
        }
        for (layer, g) in self.bottom.iter_mut().zip(&grads.bottom) {
            layer.sgd_step_dense(&g.weight, &g.bias, lr)?;
        }
        for (layer, g) in self.top.iter_mut().zip(&grads.top) {
            layer.sgd_step_dense(&g.weight, &g.bias, lr)?;
        }
        for (table, g) in self.tables.iter_mut().zip(&grads.tables) {
            match g {
                TableGrad::Sparse(s) => table.sgd_step_sparse(s, lr)?,
                TableGrad::Dense(v) => table.sgd_step_dense(v, lr)?,
            }
        }
        Ok(())
    }

    /// One single-node SGD iteration.
    pub fn train_step(&mut self, batch: &Batch, iter: u64) -> Result<StepReport<T>> {
        let (loss, grads, scale_update) = self.compute_gradients(batch, iter)?;
        self.apply_gradients(&grads, self.learning_rate())?;
        Ok(StepReport { loss, scale_update })
    }

    /// MLP parameter tensors in the same order as [`Gradients::mlp_tensors`].
    pub fn mlp_tensors(&self) -> Vec<&[T]> {
        self.bottom
            .iter()
            .chain(&self.top)
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn mlp_tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.bottom
            .iter_mut()
            .chain(self.top.iter_mut())
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn table_weights_mut(&mut self, table: usize) -> &mut [T] {
        self.tables[table].weights_mut()
    }

    /// FNV-1a over the bit patterns of every parameter and scale.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for byte in v.to_le_bytes() {
                h = (h ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for t in &self.tables {
            t.weights().iter().for_each(|w| feed(w.bits()));
            feed(t.scale().map_or(0, |s| s.get().bits()));
        }
        for l in self.bottom.iter().chain(&self.top) {
            l.weight.iter().chain(&l.bias).for_each(|w| feed(w.bits()));
            l.scales().iter().for_each(|s| feed(s.get().bits()));
        }
        h
    }

    /// Largest relative L2 distance between the parameters of two models
    /// with the same shape.
    pub fn relative_distance(&self, other: &Dlrm<T>) -> f64 {
        let mut diff = 0.0f64;
        let mut norm = 0.0f64;
        let mut acc = |a: &[T], b: &[T]| {
            for (&x, &y) in a.iter().zip(b) {
                let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
                diff += (x - y) * (x - y);
                norm += y * y;
            }
        };
        for (a, b) in self.tables.iter().zip(&other.tables) {
            acc(a.weights(), b.weights());
        }
        for (a, b) in self.mlp_tensors().into_iter().zip(other.mlp_tensors()) {
            acc(a, b);
        }
        num_traits::Float::sqrt(diff / norm.max(f64::MIN_POSITIVE))
    }
}
