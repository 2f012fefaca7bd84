use alloc::vec::Vec;

use super::allreduce::{
    allreduce_sum_dense, allreduce_union_sparse, allreduce_union_sparse_float, dequant_average, local_grad_scale,
    mean_dense, quantize_grad, unify_scales, SparseCodes,
};
use super::ec::{ec_correct, ec_update, ErrorBuffer};
use super::sparse::SparseGradient;
use super::wire::{account_bytes, CommRecord, Message};
use super::DpConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Dlrm, Gradients, ScaleUpdate, TableGrad};
use crate::quantizer::{dequantize, Bits};
use crate::real::Real;

/// Raw and transmitted values of one node's MLP gradient tensor in one
/// iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EcTrace<T> {
    pub node: usize,
    pub tensor: usize,
    pub raw: Vec<T>,
    pub transmitted: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpStepReport<T> {
    /// Mean of the node losses.
    pub loss: T,
    /// Loss of each node's shard, in rank order.
    pub node_losses: Vec<T>,
    pub comm: CommRecord,
    pub scale_update: ScaleUpdate,
    /// Gradient elements that saturated at ±qmax.
    pub clipped: usize,
    pub ec_trace: Vec<EcTrace<T>>,
}

/// N model replicas trained in lockstep on disjoint shards of each batch.
#[derive(Debug, Clone)]
pub struct DataParallel<T> {
    cfg: DpConfig,
    replicas: Vec<Dlrm<T>>,
    buffers: Vec<ErrorBuffer<T>>,
    trace: bool,
}

pub(crate) fn error_buffers<T: Real>(model: &Dlrm<T>, cfg: &DpConfig, count: usize) -> Vec<ErrorBuffer<T>> {
    let mlp: Vec<usize> = if cfg.ec_mode.covers_mlp() {
        model.mlp_tensors().iter().map(|t| t.len()).collect()
    } else {
        Vec::new()
    };
    let tables: Vec<usize> = if cfg.ec_mode.covers_tables() {
        model.tables().iter().map(|t| t.weights().len()).collect()
    } else {
        Vec::new()
    };
    (0..count).map(|_| ErrorBuffer::zeros(&mlp, &tables)).collect()
}

impl<T: Real> DataParallel<T> {
    pub fn new(model: Dlrm<T>, cfg: DpConfig) -> Result<Self> {
        cfg.validate()?;
        let buffers = error_buffers(&model, &cfg, cfg.nodes);
        let replicas = (0..cfg.nodes).map(|_| model.clone()).collect();
        Ok(DataParallel {
            cfg,
            replicas,
            buffers,
            trace: false,
        })
    }

    /// Record raw and transmitted MLP gradients in each step report.
    pub fn set_trace(&mut self, on: bool) {
        self.trace = on;
    }

    pub fn config(&self) -> &DpConfig {
        &self.cfg
    }

    pub fn replicas(&self) -> &[Dlrm<T>] {
        &self.replicas
    }

    pub fn model(&self) -> &Dlrm<T> {
        &self.replicas[0]
    }

    pub fn into_model(mut self) -> Dlrm<T> {
        self.replicas.swap_remove(0)
    }

    pub fn error_buffers(&self) -> &[ErrorBuffer<T>] {
        &self.buffers
    }

    pub fn set_quantization_enabled(&mut self, enabled: bool) {
        for r in &mut self.replicas {
            r.set_quantization_enabled(enabled);
        }
    }

    /// One synchronous iteration on `batch`, split evenly across nodes.
    pub fn step(&mut self, batch: &Batch, iter: u64) -> Result<DpStepReport<T>> {
        let n = self.cfg.nodes;
        let shards = batch.shard(n)?;
        let bits = self.cfg.grad_quant();

        let mut losses = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        let mut scale_update = ScaleUpdate::default();
        for (rank, (replica, shard)) in self.replicas.iter_mut().zip(&shards).enumerate() {
            let (loss, mut g, upd) = replica.compute_gradients(shard, iter)?;
            if !self.cfg.sparse_emb {
                densify(&mut g, replica);
            }
            if rank == 0 {
                scale_update = upd;
            }
            losses.push(loss);
            grads.push(g);
        }

        let mut out = Reducer {
            bits,
            nodes: n,
            messages: Vec::new(),
            clipped: 0,
            trace: Vec::new(),
        };

        let tensor_count = grads[0].mlp_tensors().len();
        let mut mlp_avg = Vec::with_capacity(tensor_count);
        for k in 0..tensor_count {
            let locals: Vec<&[T]> = grads.iter().map(|g| g.mlp_tensors()[k]).collect();
            let residuals = self
                .cfg
                .ec_mode
                .covers_mlp()
                .then(|| self.buffers.iter_mut().map(|b| &mut b.mlp[k]).collect());
            let trace = self.trace.then_some(k);
            mlp_avg.push(out.dense(&locals, residuals, trace)?);
        }

        let mut table_avg = Vec::with_capacity(grads[0].tables.len());
        for t in 0..grads[0].tables.len() {
            let residuals: Option<Vec<&mut Vec<T>>> = self
                .cfg
                .ec_mode
                .covers_tables()
                .then(|| self.buffers.iter_mut().map(|b| &mut b.tables[t]).collect());
            let avg = match &grads[0].tables[t] {
                TableGrad::Dense(_) => {
                    let locals: Vec<&[T]> = grads
                        .iter()
                        .map(|g| match &g.tables[t] {
                            TableGrad::Dense(v) => v.as_slice(),
                            TableGrad::Sparse(_) => unreachable!("mixed table gradients"),
                        })
                        .collect();
                    TableGrad::Dense(out.dense(&locals, residuals, None)?)
                }
                TableGrad::Sparse(_) => {
                    let locals: Vec<&SparseGradient<T>> = grads
                        .iter()
                        .map(|g| match &g.tables[t] {
                            TableGrad::Sparse(s) => s,
                            TableGrad::Dense(_) => unreachable!("mixed table gradients"),
                        })
                        .collect();
                    TableGrad::Sparse(out.sparse(&locals, residuals)?)
                }
            };
            table_avg.push(avg);
        }

        let mut avg = grads.swap_remove(0);
        for (dst, src) in avg.mlp_tensors_mut().into_iter().zip(mlp_avg) {
            *dst = src;
        }
        avg.tables = table_avg;

        for r in &mut self.replicas {
            let lr = r.learning_rate();
            r.apply_gradients(&avg, lr)?;
        }
        let reference = self.replicas[0].checksum();
        if self.replicas.iter().any(|r| r.checksum() != reference) {
            return Err(Error::ReplicaDrift);
        }
        if self.buffers.iter().any(|b| !b.is_finite()) {
            return Err(Error::Diverged);
        }

        Ok(DpStepReport {
            loss: mean_loss(&losses),
            node_losses: losses,
            comm: account_bytes(&out.messages, bits, self.cfg.index_bytes),
            scale_update,
            clipped: out.clipped,
            ec_trace: out.trace,
        })
    }
}

/// Named entry point for one data-parallel iteration.
pub fn run_dp_step<T: Real>(dp: &mut DataParallel<T>, batch: &Batch, iter: u64) -> Result<DpStepReport<T>> {
    dp.step(batch, iter)
}

pub(crate) fn mean_loss<T: Real>(losses: &[T]) -> T {
    let mut sum = T::zero();
    for &l in losses {
        sum += l;
    }
    sum / T::from_usize_lossy(losses.len())
}

pub(crate) fn densify<T: Real>(g: &mut Gradients<T>, model: &Dlrm<T>) {
    for (tg, table) in g.tables.iter_mut().zip(model.tables()) {
        if let TableGrad::Sparse(s) = tg {
            *tg = TableGrad::Dense(s.to_dense(table.rows()));
        }
    }
}

struct Reducer<T> {
    bits: Option<Bits>,
    nodes: usize,
    messages: Vec<Message>,
    clipped: usize,
    trace: Vec<EcTrace<T>>,
}

impl<T: Real> Reducer<T> {
    fn dense(&mut self, locals: &[&[T]], residuals: Option<Vec<&mut Vec<T>>>, trace: Option<usize>) -> Result<Vec<T>> {
        let len = locals[0].len();
        let Some(bits) = self.bits else {
            self.messages
                .extend(locals.iter().map(|l| Message::Dense { elements: l.len() }));
            if let Some(k) = trace {
                for (node, l) in locals.iter().enumerate() {
                    self.trace.push(EcTrace {
                        node,
                        tensor: k,
                        raw: l.to_vec(),
                        transmitted: l.to_vec(),
                    });
                }
            }
            return mean_dense(locals);
        };

        let corrected: Vec<Vec<T>> = match &residuals {
            Some(res) => locals
                .iter()
                .zip(res)
                .map(|(g, r)| ec_correct(g, r))
                .collect::<Result<_>>()?,
            None => locals.iter().map(|g| g.to_vec()).collect(),
        };
        let scales = corrected
            .iter()
            .map(|c| local_grad_scale(c, bits))
            .collect::<Result<Vec<_>>>()?;
        self.messages.extend(scales.iter().map(|_| Message::Scale));
        let scale = unify_scales(&scales, bits);

        let mut codes = Vec::with_capacity(locals.len());
        for (node, c) in corrected.iter().enumerate() {
            let (q, clipped) = quantize_grad(c, scale, bits);
            self.clipped += clipped;
            self.messages.push(Message::Dense { elements: len });
            if residuals.is_some() || trace.is_some() {
                let sent = dequantize(&q, scale);
                if let Some(k) = trace {
                    self.trace.push(EcTrace {
                        node,
                        tensor: k,
                        raw: locals[node].to_vec(),
                        transmitted: sent.clone(),
                    });
                }
                codes.push((q, Some(sent)));
            } else {
                codes.push((q, None));
            }
        }
        if let Some(mut res) = residuals {
            for ((c, (_, sent)), r) in corrected.iter().zip(&codes).zip(res.iter_mut()) {
                ec_update(c, sent.as_ref().expect("dequantized"), r)?;
            }
        }
        let codes: Vec<Vec<i32>> = codes.into_iter().map(|(q, _)| q).collect();
        let sums = allreduce_sum_dense(&codes)?;
        Ok(dequant_average(&sums, scale, self.nodes))
    }

    fn sparse(
        &mut self,
        locals: &[&SparseGradient<T>],
        residuals: Option<Vec<&mut Vec<T>>>,
    ) -> Result<SparseGradient<T>> {
        let (table, dim) = (locals[0].table, locals[0].dim);
        let Some(bits) = self.bits else {
            self.messages.extend(locals.iter().map(|l| Message::Sparse {
                rows: l.nnz_rows(),
                dim,
            }));
            let mut sum = allreduce_union_sparse_float(locals)?;
            let n = T::from_usize_lossy(self.nodes);
            sum.values.iter_mut().for_each(|v| *v /= n);
            return Ok(sum);
        };

        let corrected: Vec<SparseGradient<T>> = match &residuals {
            Some(res) => locals
                .iter()
                .zip(res)
                .map(|(g, r)| {
                    let mut c = (*g).clone();
                    for (k, &idx) in g.indices.iter().enumerate() {
                        let row = &r[idx as usize * dim..(idx as usize + 1) * dim];
                        c.values[k * dim..(k + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(v, &e)| *v += e);
                    }
                    c
                })
                .collect(),
            None => locals.iter().map(|g| (*g).clone()).collect(),
        };
        let scales = corrected
            .iter()
            .map(|c| local_grad_scale(&c.values, bits))
            .collect::<Result<Vec<_>>>()?;
        self.messages.extend(scales.iter().map(|_| Message::Scale));
        let scale = unify_scales(&scales, bits);

        let mut parts = Vec::with_capacity(locals.len());
        for c in &corrected {
            let (q, clipped) = quantize_grad(&c.values, scale, bits);
            self.clipped += clipped;
            self.messages.push(Message::Sparse {
                rows: c.nnz_rows(),
                dim,
            });
            parts.push(SparseCodes {
                dim,
                indices: c.indices.clone(),
                codes: q,
            });
        }
        if let Some(mut res) = residuals {
            for ((c, p), r) in corrected.iter().zip(&parts).zip(res.iter_mut()) {
                let sent = dequantize(&p.codes, scale);
                for (k, &idx) in c.indices.iter().enumerate() {
                    let span = k * dim..(k + 1) * dim;
                    let idx = idx as usize;
                    ec_update(&c.values[span.clone()], &sent[span], &mut r[idx * dim..(idx + 1) * dim])?;
                }
            }
        }
        let (indices, sums) = allreduce_union_sparse(&parts)?;
        let values = dequant_average(&sums, scale, self.nodes);
        SparseGradient::new(table, dim, indices, values)
    }
}
