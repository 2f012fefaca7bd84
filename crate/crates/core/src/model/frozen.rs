//! Inference-only model built from integer codes and scales, as stored in
//! an exported model file.

use alloc::vec;
use alloc::vec::Vec;

use super::mlp::{mlp_forward, LayerView};
use super::{interaction, Dlrm, ModelConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::quantizer::{self, Bits, Scale};

/// A weight tensor as stored: raw FP32, or codes with one scale per row
/// (or a single scale for the whole tensor).
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Float(Vec<f32>),
    Quantized {
        bits: Bits,
        scales: Vec<f32>,
        codes: Vec<i32>,
    },
}

impl StoredTensor {
    pub fn len(&self) -> usize {
        match self {
            StoredTensor::Float(v) => v.len(),
            StoredTensor::Quantized { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bits(&self) -> Option<Bits> {
        match self {
            StoredTensor::Float(_) => None,
            StoredTensor::Quantized { bits, .. } => Some(*bits),
        }
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.len() != rows * cols {
            return Err(Error::shape(rows * cols, self.len()));
        }
        if let StoredTensor::Quantized { bits, scales, codes } = self {
            if scales.len() != 1 && scales.len() != rows {
                return Err(Error::shape(rows, scales.len()));
            }
            for &s in scales {
                Scale::new(s)?;
            }
            let qmax = bits.qmax();
            if let Some(&q) = codes.iter().find(|q| q.abs() > qmax) {
                return Err(Error::CodeOutOfRange(q));
            }
        }
        Ok(())
    }

    fn decode_row(&self, row: usize, cols: usize, out: &mut [f32]) {
        let span = row * cols..(row + 1) * cols;
        match self {
            StoredTensor::Float(v) => out.copy_from_slice(&v[span]),
            StoredTensor::Quantized { scales, codes, .. } => {
                let s = Scale::new(if scales.len() == 1 { scales[0] } else { scales[row] }).expect("validated scale");
                for (o, &q) in out.iter_mut().zip(&codes[span]) {
                    *o = quantizer::dequantize_one(q, s);
                }
            }
        }
    }

    /// Dequantized (or copied) values, row-major `rows x cols`.
    pub fn decode(&self, rows: usize, cols: usize) -> Vec<f32> {
        let mut out = vec![0.0; rows * cols];
        for (r, chunk) in out.chunks_exact_mut(cols.max(1)).enumerate().take(rows) {
            self.decode_row(r, cols, chunk);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTable {
    pub rows: usize,
    pub dim: usize,
    pub data: StoredTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
    pub weight: StoredTensor,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenDlrm {
    pub config: ModelConfig,
    pub tables: Vec<FrozenTable>,
    pub bottom: Vec<FrozenLayer>,
    pub top: Vec<FrozenLayer>,
}

impl FrozenDlrm {
    /// Snapshot of `model`'s forward-pass weights under its current scales.
    pub fn from_model(model: &Dlrm<f32>) -> Result<Self> {
        let tables = model
            .tables()
            .iter()
            .map(|t| {
                let data = match t.codes()? {
                    Some((s, bits, codes)) => StoredTensor::Quantized {
                        bits,
                        scales: vec![s.get()],
                        codes,
                    },
                    None => StoredTensor::Float(t.weights().to_vec()),
                };
                Ok(FrozenTable {
                    rows: t.rows(),
                    dim: t.dim(),
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let quant = model.mlp_quant();
        let layer = |l: &super::DenseLayer<f32>| -> Result<FrozenLayer> {
            let weight = match quant {
                Some((bits, granularity)) => {
                    let (scales, codes) = l.codes(bits, granularity)?;
                    StoredTensor::Quantized {
                        bits,
                        scales: scales.iter().map(|s| s.get()).collect(),
                        codes,
                    }
                }
                None => StoredTensor::Float(l.weight.clone()),
            };
            Ok(FrozenLayer {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                relu: l.relu,
                weight,
                bias: l.bias.clone(),
            })
        };
        let bottom = model.bottom().iter().map(layer).collect::<Result<Vec<_>>>()?;
        let top = model.top().iter().map(layer).collect::<Result<Vec<_>>>()?;
        let mut config = model.config().clone();
        config.emb_bits = tables[0].data.bits().map_or(super::FLOAT_BITS, Bits::get);
        config.mlp_bits = bottom[0].weight.bits().map_or(super::FLOAT_BITS, Bits::get);
        Ok(FrozenDlrm {
            config,
            tables,
            bottom,
            top,
        })
    }

    /// Checks every tensor against the config shapes and code ranges.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.tables.len() != self.config.num_tables() {
            return Err(Error::shape(self.config.num_tables(), self.tables.len()));
        }
        for (t, &rows) in self.tables.iter().zip(&self.config.table_rows) {
            if t.rows != rows || t.dim != self.config.embed_dim {
                return Err(Error::shape(rows * self.config.embed_dim, t.rows * t.dim));
            }
            t.data.check(t.rows, t.dim)?;
            if let StoredTensor::Quantized { scales, .. } = &t.data {
                if scales.len() != 1 {
                    return Err(Error::shape(1, scales.len()));
                }
            }
        }
        let check_stack = |layers: &[FrozenLayer], shapes: Vec<(usize, usize)>, last_relu: bool| {
            if layers.len() != shapes.len() {
                return Err(Error::shape(shapes.len(), layers.len()));
            }
            for (k, (l, (i, o))) in layers.iter().zip(shapes).enumerate() {
                if l.in_dim != i || l.out_dim != o || l.bias.len() != o {
                    return Err(Error::shape(i * o, l.in_dim * l.out_dim));
                }
                if l.relu != (k + 1 < layers.len() || last_relu) {
                    return Err(Error::Config("unexpected activation layout".into()));
                }
                l.weight.check(o, i)?;
            }
            Ok(())
        };
        check_stack(&self.bottom, self.config.bottom_shapes(), true)?;
        check_stack(&self.top, self.config.top_shapes(), false)?;
        Ok(())
    }

    /// Logits computed from the stored codes. Matches the exporting
    /// model's [`Dlrm::predict`] bit for bit.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<f32>> {
        batch.validate(&self.config.table_rows)?;
        let n = batch.len();
        if n == 0 {
            return Err(Error::Batch("empty batch".into()));
        }
        let d = self.config.embed_dim;
        let act_bits = if self.config.quantize_activations {
            self.bottom[0].weight.bits()
        } else {
            None
        };

        let bottom_w: Vec<Vec<f32>> = self
            .bottom
            .iter()
            .map(|l| l.weight.decode(l.out_dim, l.in_dim))
            .collect();
        let z = mlp_forward(
            batch.dense.clone(),
            n,
            &frozen_views(&self.bottom, &bottom_w),
            act_bits,
            None,
        )?;

        let mut embs = Vec::with_capacity(self.tables.len());
        let mut row = vec![0.0f32; d];
        for (t, table) in self.tables.iter().enumerate() {
            let mut pooled = vec![0.0f32; n * d];
            for b in 0..n {
                let out = &mut pooled[b * d..(b + 1) * d];
                for (k, &idx) in batch.bag(t, b).iter().enumerate() {
                    table.data.decode_row(idx as usize, d, &mut row);
                    if k == 0 {
                        out.copy_from_slice(&row);
                    } else {
                        for (p, &r) in out.iter_mut().zip(&row) {
                            *p += r;
                        }
                    }
                }
            }
            embs.push(pooled);
        }
        let inter = interaction::interact(&z, &embs, n, d);

        let top_w: Vec<Vec<f32>> = self.top.iter().map(|l| l.weight.decode(l.out_dim, l.in_dim)).collect();
        mlp_forward(inter, n, &frozen_views(&self.top, &top_w), act_bits, None)
    }
}

fn frozen_views<'a>(layers: &'a [FrozenLayer], weights: &'a [Vec<f32>]) -> Vec<LayerView<'a, f32>> {
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

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_batch, tiny_config};
    use super::*;
    use crate::quantizer::Granularity;

    #[test]
    fn frozen_forward_is_bit_identical() {
        for (bits, gran, act) in [
            (4, Granularity::PerChannel, false),
            (4, Granularity::PerTensor, true),
            (8, Granularity::PerChannel, false),
            (32, Granularity::PerChannel, false),
        ] {
            let mut cfg = tiny_config(bits);
            cfg.mlp_granularity = gran;
            cfg.quantize_activations = act;
            let mut m = Dlrm::<f32>::new(cfg.clone(), 11).unwrap();
            for it in 0..5 {
                m.train_step(&tiny_batch(&cfg, 8, it), it).unwrap();
            }
            let frozen = FrozenDlrm::from_model(&m).unwrap();
            frozen.validate().unwrap();
            let batch = tiny_batch(&cfg, 9, 99);
            let a = m.predict(&batch).unwrap();
            let b = frozen.forward(&batch).unwrap();
            assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn validate_catches_bad_codes() {
        let cfg = tiny_config(4);
        let mut m = Dlrm::<f32>::new(cfg.clone(), 1).unwrap();
        m.refresh_scales(0).unwrap();
        let mut f = FrozenDlrm::from_model(&m).unwrap();
        if let StoredTensor::Quantized { codes, .. } = &mut f.tables[0].data {
            codes[0] = 9;
        }
        assert_eq!(f.validate(), Err(Error::CodeOutOfRange(9)));
    }
}
