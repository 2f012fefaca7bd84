//! Training runs: data loading, the training loop in all three modes,
//! evaluation, and the run's output files.

use std::fs;
use std::path::Path;

use dqrm_core::comm::{CommRecord, DataParallel, SimulatedDp};
use dqrm_core::data::{generate_synthetic, make_batches, Batch, Sample};
use dqrm_core::metrics::EvalAccumulator;
use dqrm_core::model::loss::{bce, sigmoid};
use dqrm_core::model::{Dlrm, FrozenDlrm, ScaleUpdate};
use dqrm_core::Error as CoreError;
use log::{debug, info};

use crate::config::RunConfig;
use crate::criteo::load_samples;
use crate::error::{Error, Result};
use crate::format::encode_model;
use crate::inspect::{histogram_text, symmetric_range};
use crate::log::{LogRecord, MetricsLog};

pub const LOG_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.dqrm";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Criteo files when configured, otherwise a synthetic stream split into
/// a leading train part and a trailing test part.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(train) = &cfg.train_data {
        let train = load_samples(train, cfg.dense_in, &cfg.table_rows)?;
        let test = match &cfg.test_data {
            Some(p) => load_samples(p, cfg.dense_in, &cfg.table_rows)?,
            None => Vec::new(),
        };
        return Ok(Dataset { train, test });
    }
    let mut all: Vec<Sample> = generate_synthetic(cfg.synth_spec())?.map(|r| r.to_sample()).collect();
    let test_len = (all.len() as f64 * cfg.test_fraction).round() as usize;
    let test = all.split_off(all.len() - test_len);
    Ok(Dataset { train: all, test })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub loss: f64,
}

pub fn evaluate_scores(logits: impl IntoIterator<Item = (f32, f32)>) -> Result<EvalStats> {
    let mut acc = EvalAccumulator::new();
    let mut n = 0u64;
    let mut loss = 0.0f64;
    for (logit, label) in logits {
        acc.push(f64::from(sigmoid(logit)), label as u8);
        loss += f64::from(bce(logit, label));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Core(CoreError::EmptyTensor));
    }
    acc.add_loss(loss, n);
    let auc = match acc.roc_auc() {
        Ok(a) => Some(a),
        Err(CoreError::UndefinedAuc) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(EvalStats {
        accuracy: acc.accuracy()?,
        auc,
        loss: acc.mean_loss().unwrap_or(0.0),
    })
}

const EVAL_BATCH: usize = 1024;

pub fn evaluate_model(model: &Dlrm<f32>, samples: &[Sample]) -> Result<EvalStats> {
    let mut pairs = Vec::with_capacity(samples.len());
    for b in make_batches(samples.iter().cloned(), EVAL_BATCH, false) {
        let logits = model.predict(&b)?;
        pairs.extend(logits.into_iter().zip(b.labels.iter().copied()));
    }
    evaluate_scores(pairs)
}

pub fn evaluate_frozen(model: &FrozenDlrm, samples: &[Sample]) -> Result<EvalStats> {
    let mut pairs = Vec::with_capacity(samples.len());
    for b in make_batches(samples.iter().cloned(), EVAL_BATCH, false) {
        let logits = model.forward(&b)?;
        pairs.extend(logits.into_iter().zip(b.labels.iter().copied()));
    }
    evaluate_scores(pairs)
}

/// The three ways of running an iteration.
pub enum Trainer {
    Single(Box<Dlrm<f32>>),
    Replicas(Box<DataParallel<f32>>),
    Simulated(Box<SimulatedDp<f32>>),
}

pub struct StepOutcome {
    pub loss: f32,
    pub comm: CommRecord,
    pub scale_update: ScaleUpdate,
    pub clipped: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Dlrm::<f32>::new(cfg.model_config(), cfg.seed)?;
        let dp = cfg.dp_config();
        Ok(if cfg.simulated {
            Trainer::Simulated(Box::new(SimulatedDp::new(model, dp)?))
        } else if cfg.nodes == 1 && cfg.grad_bits == 32 {
            Trainer::Single(Box::new(model))
        } else {
            Trainer::Replicas(Box::new(DataParallel::new(model, dp)?))
        })
    }

    pub fn model(&self) -> &Dlrm<f32> {
        match self {
            Trainer::Single(m) => m,
            Trainer::Replicas(d) => d.model(),
            Trainer::Simulated(s) => s.model(),
        }
    }

    pub fn set_quantization_enabled(&mut self, on: bool) {
        match self {
            Trainer::Single(m) => m.set_quantization_enabled(on),
            Trainer::Replicas(d) => d.set_quantization_enabled(on),
            Trainer::Simulated(s) => s.set_quantization_enabled(on),
        }
    }

    pub fn step(&mut self, batch: &Batch, iter: u64) -> Result<StepOutcome> {
        Ok(match self {
            Trainer::Single(m) => {
                let r = m.train_step(batch, iter)?;
                StepOutcome {
                    loss: r.loss,
                    comm: CommRecord::default(),
                    scale_update: r.scale_update,
                    clipped: 0,
                }
            }
            Trainer::Replicas(d) => {
                let r = d.step(batch, iter)?;
                StepOutcome {
                    loss: r.loss,
                    comm: r.comm,
                    scale_update: r.scale_update,
                    clipped: r.clipped,
                }
            }
            Trainer::Simulated(s) => {
                let r = s.step(batch)?;
                StepOutcome {
                    loss: r.loss,
                    comm: r.comm,
                    scale_update: r.scale_update,
                    clipped: r.clipped,
                }
            }
        })
    }
}

pub struct RunOutput {
    pub log: Vec<u8>,
    pub model: FrozenDlrm,
    pub model_bytes: Vec<u8>,
    /// (file name, contents) of per-epoch table histograms.
    pub histograms: Vec<(String, String)>,
    pub final_train: EvalStats,
    pub final_test: Option<EvalStats>,
}

fn eval_record(iteration: u64, epoch: u32, train: &EvalStats, test: Option<&EvalStats>) -> LogRecord {
    LogRecord::Eval {
        iteration,
        epoch,
        train_acc: train.accuracy,
        train_auc: train.auc,
        test_loss: test.map_or(0.0, |t| t.loss),
        test_acc: test.map_or(0.0, |t| t.accuracy),
        test_auc: test.and_then(|t| t.auc),
    }
}

fn histograms(model: &Dlrm<f32>, bins: usize, epoch: u32) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (t, table) in model.tables().iter().enumerate() {
        let (lo, hi) = symmetric_range(table.weights());
        let (master, quantized) = table.histograms(bins, lo, hi)?;
        out.push((
            format!("hist_t{t}_e{epoch}_master.txt"),
            histogram_text(&master, lo, hi),
        ));
        out.push((
            format!("hist_t{t}_e{epoch}_quant.txt"),
            histogram_text(&quantized, lo, hi),
        ));
    }
    Ok(out)
}

/// Runs `cfg.pretrain_epochs` unquantized epochs followed by `cfg.epochs`
/// quantization-aware epochs. Everything is kept in memory.
pub fn run_training(cfg: &RunConfig, data: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    if data.train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "{} training samples, fewer than one batch of {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let mut log = MetricsLog::new(Vec::new());
    log.write(&LogRecord::Config { config: cfg.to_map() })?;

    let mut trainer = Trainer::new(cfg)?;
    let drop_last = cfg.nodes > 1 || cfg.simulated;
    let mut iter = 0u64;
    let mut last_loss = f32::NAN;
    let mut comm_total = 0u64;
    let mut hist = Vec::new();
    let total_epochs = cfg.pretrain_epochs + cfg.epochs;
    let test = (!data.test.is_empty()).then_some(data.test.as_slice());
    for epoch in 0..total_epochs {
        if cfg.pretrain_epochs > 0 && epoch == cfg.pretrain_epochs {
            info!("pretraining done after {epoch} epochs; enabling quantization");
            trainer.set_quantization_enabled(true);
        }
        for batch in make_batches(data.train.iter().cloned(), cfg.batch_size, drop_last) {
            let out = trainer.step(&batch, iter)?;
            if !out.loss.is_finite() {
                return Err(CoreError::Diverged.into());
            }
            last_loss = out.loss;
            comm_total += out.comm.total();
            log.write(&LogRecord::Train {
                iteration: iter,
                epoch,
                train_loss: f64::from(out.loss),
                comm: out.comm.into(),
                scale_update: out.scale_update.into(),
                clipped: out.clipped as u64,
            })?;
            iter += 1;
            if cfg.eval_every > 0 && iter.is_multiple_of(cfg.eval_every) {
                let train = evaluate_model(trainer.model(), &data.train)?;
                let t = test.map(|t| evaluate_model(trainer.model(), t)).transpose()?;
                log.write(&eval_record(iter, epoch, &train, t.as_ref()))?;
            }
        }
        let train = evaluate_model(trainer.model(), &data.train)?;
        let t = test.map(|t| evaluate_model(trainer.model(), t)).transpose()?;
        debug!(
            "epoch {epoch}: loss {last_loss:.5} train acc {:.4} test acc {:?}",
            train.accuracy,
            t.map(|t| t.accuracy)
        );
        log.write(&eval_record(iter, epoch, &train, t.as_ref()))?;
        if cfg.histogram_bins > 0 {
            hist.extend(histograms(trainer.model(), cfg.histogram_bins, epoch)?);
        }
    }

    let model = FrozenDlrm::from_model(trainer.model())?;
    let model_bytes = encode_model(&model)?;
    let final_train = evaluate_model(trainer.model(), &data.train)?;
    let final_test = test.map(|t| evaluate_model(trainer.model(), t)).transpose()?;
    log.write(&LogRecord::Summary {
        iterations: iter,
        final_train_loss: f64::from(last_loss),
        train_acc: final_train.accuracy,
        test_acc: final_test.map_or(0.0, |t| t.accuracy),
        test_auc: final_test.and_then(|t| t.auc),
        comm_bytes: comm_total,
        model_bytes: model_bytes.len() as u64,
    })?;
    Ok(RunOutput {
        log: log.into_inner(),
        model,
        model_bytes,
        histograms: hist,
        final_train,
        final_test,
    })
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(p, e))
}

/// Loads data, trains, and writes the log, model, resolved config and
/// histograms into `cfg.out_dir`.
pub fn train_to_dir(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    info!("{} train / {} test samples", data.train.len(), data.test.len());
    let out = run_training(cfg, &data)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, LOG_FILE, &out.log)?;
    write(dir, MODEL_FILE, &out.model_bytes)?;
    write(dir, CONFIG_FILE, cfg.to_text().as_bytes())?;
    for (name, text) in &out.histograms {
        write(dir, name, text.as_bytes())?;
    }
    Ok(out)
}
