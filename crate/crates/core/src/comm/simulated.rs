//! Data-parallel semantics on a single replica: the global batch is fed as
//! N consecutive microbatches whose gradients accumulate in one buffer, and
//! the weights update once per group of N.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::allreduce::{dequant_average, local_grad_scale};
use super::dp::{densify, error_buffers, mean_loss, DpStepReport};
use super::ec::{ec_correct, ec_update, ErrorBuffer};
use super::sparse::SparseGradient;
use super::wire::{account_bytes, CommRecord, Message};
use super::DpConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Dlrm, Gradients, ScaleUpdate, TableGrad};
use crate::quantizer::{self, Bits, Scale};
use crate::real::Real;

#[derive(Debug, Clone)]
enum DenseAcc<T> {
    Float(Vec<T>),
    Codes { scale: Scale<T>, sums: Vec<i64> },
}

#[derive(Debug, Clone)]
enum SparseAcc<T> {
    Float(BTreeMap<u32, Vec<T>>),
    Codes {
        scale: Scale<T>,
        rows: BTreeMap<u32, Vec<i64>>,
    },
}

#[derive(Debug, Clone)]
enum TableAcc<T> {
    Dense(DenseAcc<T>),
    Sparse(SparseAcc<T>, usize),
}

#[derive(Debug, Clone)]
struct Accumulator<T> {
    mlp: Vec<DenseAcc<T>>,
    tables: Vec<TableAcc<T>>,
}

#[derive(Debug, Clone)]
pub struct SimulatedDp<T> {
    cfg: DpConfig,
    model: Dlrm<T>,
    ec: Vec<ErrorBuffer<T>>,
    acc: Option<Accumulator<T>>,
    buffer_clean: bool,
    buffer_clears: u64,
    position: usize,
    group: u64,
    losses: Vec<T>,
    tally: Tally,
    scale_update: ScaleUpdate,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    messages: Vec<Message>,
    clipped: usize,
}

impl<T: Real> SimulatedDp<T> {
    pub fn new(model: Dlrm<T>, cfg: DpConfig) -> Result<Self> {
        cfg.validate()?;
        let ec = error_buffers(&model, &cfg, cfg.nodes);
        Ok(SimulatedDp {
            cfg,
            model,
            ec,
            acc: None,
            buffer_clean: true,
            buffer_clears: 0,
            position: 0,
            group: 0,
            losses: Vec::new(),
            tally: Tally::default(),
            scale_update: ScaleUpdate::default(),
        })
    }

    pub fn model(&self) -> &Dlrm<T> {
        &self.model
    }

    pub fn into_model(self) -> Dlrm<T> {
        self.model
    }

    pub fn error_buffers(&self) -> &[ErrorBuffer<T>] {
        &self.ec
    }

    /// Number of times the gradient buffer was reset.
    pub fn buffer_clears(&self) -> u64 {
        self.buffer_clears
    }

    /// Weight updates performed so far.
    pub fn updates(&self) -> u64 {
        self.group
    }

    pub fn set_quantization_enabled(&mut self, enabled: bool) {
        self.model.set_quantization_enabled(enabled);
    }

    /// Feeds one microbatch. Returns a report when it completed a group of
    /// N and the weights were updated.
    pub fn microbatch(&mut self, micro: &Batch) -> Result<Option<DpStepReport<T>>> {
        let bits = self.cfg.grad_quant();
        let (loss, mut grads, upd) = self.model.compute_gradients(micro, self.group)?;
        if !self.cfg.sparse_emb {
            densify(&mut grads, &self.model);
        }
        if self.buffer_clean {
            self.acc = None;
            self.buffer_clean = false;
            self.buffer_clears += 1;
            self.scale_update = upd;
        }
        let p = self.position;
        let first = self.acc.is_none();
        let mut acc = self.acc.take();

        let mut mlp_acc = Vec::new();
        for (k, g) in grads.mlp_tensors().into_iter().enumerate() {
            let res = self.cfg.ec_mode.covers_mlp().then(|| &mut self.ec[p].mlp[k]);
            let slot = acc.as_mut().map(|a| &mut a.mlp[k]);
            if let Some(a) = self.tally.add_dense(slot, g, res, bits, first)? {
                mlp_acc.push(a);
            }
        }
        let mut table_acc = Vec::new();
        for (t, tg) in grads.tables.iter().enumerate() {
            let res = self.cfg.ec_mode.covers_tables().then(|| &mut self.ec[p].tables[t]);
            match tg {
                TableGrad::Dense(g) => {
                    let slot = acc.as_mut().map(|a| match &mut a.tables[t] {
                        TableAcc::Dense(d) => d,
                        TableAcc::Sparse(..) => unreachable!("mixed table gradients"),
                    });
                    if let Some(a) = self.tally.add_dense(slot, g, res, bits, first)? {
                        table_acc.push(TableAcc::Dense(a));
                    }
                }
                TableGrad::Sparse(g) => {
                    let slot = acc.as_mut().map(|a| match &mut a.tables[t] {
                        TableAcc::Sparse(s, _) => s,
                        TableAcc::Dense(_) => unreachable!("mixed table gradients"),
                    });
                    if let Some(a) = self.tally.add_sparse(slot, g, res, bits, first)? {
                        table_acc.push(TableAcc::Sparse(a, g.dim));
                    }
                }
            }
        }
        self.acc = match acc {
            Some(a) => Some(a),
            None => Some(Accumulator {
                mlp: mlp_acc,
                tables: table_acc,
            }),
        };
        self.losses.push(loss);
        self.position += 1;
        if self.position < self.cfg.nodes {
            return Ok(None);
        }
        self.finish_group(grads).map(Some)
    }

    /// Splits `global` into N microbatches and feeds them in order.
    pub fn step(&mut self, global: &Batch) -> Result<DpStepReport<T>> {
        if self.position != 0 {
            return Err(Error::Batch("step called in the middle of a group".into()));
        }
        let mut report = None;
        for micro in global.shard(self.cfg.nodes)? {
            report = self.microbatch(&micro)?;
        }
        Ok(report.expect("group completes after N microbatches"))
    }

    fn finish_group(&mut self, mut template: Gradients<T>) -> Result<DpStepReport<T>> {
        let n = self.cfg.nodes;
        let nt = T::from_usize_lossy(n);
        let acc = self.acc.take().expect("accumulated group");
        let dense = |a: DenseAcc<T>| match a {
            DenseAcc::Float(mut v) => {
                v.iter_mut().for_each(|x| *x /= nt);
                v
            }
            DenseAcc::Codes { scale, sums } => dequant_average(&sums, scale, n),
        };
        for (dst, a) in template.mlp_tensors_mut().into_iter().zip(acc.mlp) {
            *dst = dense(a);
        }
        template.tables = acc
            .tables
            .into_iter()
            .enumerate()
            .map(|(t, a)| match a {
                TableAcc::Dense(d) => Ok(TableGrad::Dense(dense(d))),
                TableAcc::Sparse(SparseAcc::Float(rows), dim) => {
                    let indices = rows.keys().copied().collect();
                    let mut values: Vec<T> = rows.into_values().flatten().collect();
                    values.iter_mut().for_each(|x| *x /= nt);
                    SparseGradient::new(t, dim, indices, values).map(TableGrad::Sparse)
                }
                TableAcc::Sparse(SparseAcc::Codes { scale, rows }, dim) => {
                    let indices = rows.keys().copied().collect();
                    let sums: Vec<i64> = rows.into_values().flatten().collect();
                    SparseGradient::new(t, dim, indices, dequant_average(&sums, scale, n)).map(TableGrad::Sparse)
                }
            })
            .collect::<Result<_>>()?;

        let lr = self.model.learning_rate();
        self.model.apply_gradients(&template, lr)?;
        if self.ec.iter().any(|b| !b.is_finite()) {
            return Err(Error::Diverged);
        }
        self.buffer_clean = true;
        self.position = 0;
        self.group += 1;

        let node_losses = core::mem::take(&mut self.losses);
        let tally = core::mem::take(&mut self.tally);
        let comm: CommRecord = account_bytes(&tally.messages, self.cfg.grad_quant(), self.cfg.index_bytes);
        let clipped = tally.clipped;
        Ok(DpStepReport {
            loss: mean_loss(&node_losses),
            node_losses,
            comm,
            scale_update: self.scale_update,
            clipped,
            ec_trace: Vec::new(),
        })
    }
}

impl Tally {
    fn add_dense<T: Real>(
        &mut self,
        slot: Option<&mut DenseAcc<T>>,
        g: &[T],
        res: Option<&mut Vec<T>>,
        bits: Option<Bits>,
        first: bool,
    ) -> Result<Option<DenseAcc<T>>> {
        let Some(bits) = bits else {
            self.messages.push(Message::Dense { elements: g.len() });
            return Ok(match slot {
                Some(DenseAcc::Float(sum)) => {
                    sum.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                    None
                }
                Some(DenseAcc::Codes { .. }) => unreachable!("mode is fixed"),
                None => Some(DenseAcc::Float(g.to_vec())),
            });
        };
        let corrected = match &res {
            Some(r) => ec_correct(g, r)?,
            None => g.to_vec(),
        };
        let scale = match &slot {
            Some(DenseAcc::Codes { scale, .. }) => *scale,
            _ => {
                debug_assert!(first);
                self.messages.push(Message::Scale);
                local_grad_scale(&corrected, bits)?.unwrap_or_else(|| Scale::degenerate(bits))
            }
        };
        self.messages.push(Message::Dense { elements: g.len() });
        self.clipped += corrected.iter().filter(|&&v| quantizer::clips(v, scale, bits)).count();
        let codes = quantizer::quantize(&corrected, scale, bits);
        if let Some(r) = res {
            ec_update(&corrected, &quantizer::dequantize(&codes, scale), r)?;
        }
        Ok(match slot {
            Some(DenseAcc::Codes { sums, .. }) => {
                sums.iter_mut().zip(&codes).for_each(|(s, &q)| *s += i64::from(q));
                None
            }
            Some(DenseAcc::Float(_)) => unreachable!("mode is fixed"),
            None => Some(DenseAcc::Codes {
                scale,
                sums: codes.iter().map(|&q| i64::from(q)).collect(),
            }),
        })
    }

    fn add_sparse<T: Real>(
        &mut self,
        slot: Option<&mut SparseAcc<T>>,
        g: &SparseGradient<T>,
        res: Option<&mut Vec<T>>,
        bits: Option<Bits>,
        first: bool,
    ) -> Result<Option<SparseAcc<T>>> {
        let dim = g.dim;
        self.messages.push(Message::Sparse {
            rows: g.nnz_rows(),
            dim,
        });
        let Some(bits) = bits else {
            let mut fresh = BTreeMap::new();
            let rows = match slot {
                Some(SparseAcc::Float(rows)) => rows,
                Some(SparseAcc::Codes { .. }) => unreachable!("mode is fixed"),
                None => &mut fresh,
            };
            for (k, &idx) in g.indices.iter().enumerate() {
                match rows.get_mut(&idx) {
                    Some(acc) => acc.iter_mut().zip(g.row(k)).for_each(|(a, &v)| *a += v),
                    None => {
                        rows.insert(idx, g.row(k).to_vec());
                    }
                }
            }
            return Ok(first.then_some(SparseAcc::Float(fresh)));
        };

        let mut corrected = g.values.clone();
        if let Some(r) = &res {
            for (k, &idx) in g.indices.iter().enumerate() {
                let row = &r[idx as usize * dim..(idx as usize + 1) * dim];
                corrected[k * dim..(k + 1) * dim]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(v, &e)| *v += e);
            }
        }
        let scale = match &slot {
            Some(SparseAcc::Codes { scale, .. }) => *scale,
            _ => {
                self.messages.push(Message::Scale);
                local_grad_scale(&corrected, bits)?.unwrap_or_else(|| Scale::degenerate(bits))
            }
        };
        self.clipped += corrected.iter().filter(|&&v| quantizer::clips(v, scale, bits)).count();
        let codes = quantizer::quantize(&corrected, scale, bits);
        if let Some(r) = res {
            let sent = quantizer::dequantize(&codes, scale);
            for (k, &idx) in g.indices.iter().enumerate() {
                let span = k * dim..(k + 1) * dim;
                let idx = idx as usize;
                ec_update(
                    &corrected[span.clone()],
                    &sent[span],
                    &mut r[idx * dim..(idx + 1) * dim],
                )?;
            }
        }
        let mut fresh = BTreeMap::new();
        let rows = match slot {
            Some(SparseAcc::Codes { rows, .. }) => rows,
            Some(SparseAcc::Float(_)) => unreachable!("mode is fixed"),
            None => &mut fresh,
        };
        for (k, &idx) in g.indices.iter().enumerate() {
            let acc = rows.entry(idx).or_insert_with(|| vec![0; dim]);
            acc.iter_mut()
                .zip(&codes[k * dim..(k + 1) * dim])
                .for_each(|(a, &q)| *a += i64::from(q));
        }
        Ok(first.then_some(SparseAcc::Codes { scale, rows: fresh }))
    }
}

/// Trains on each global batch in turn and returns the final model.
pub fn run_simulated_dp<T, I>(model: Dlrm<T>, cfg: DpConfig, batches: I) -> Result<Dlrm<T>>
where
    T: Real,
    I: IntoIterator<Item = Batch>,
{
    let mut sim = SimulatedDp::new(model, cfg)?;
    for b in batches {
        sim.step(&b)?;
    }
    Ok(sim.into_model())
}
