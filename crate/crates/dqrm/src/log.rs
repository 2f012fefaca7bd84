//! Metrics log: UTF-8, one JSON object per line, tagged by `kind`.
//!
//! | kind      | fields |
//! |-----------|--------|
//! | `config`  | `config`: resolved run configuration as a string map |
//! | `train`   | `iteration`, `epoch`, `train_loss`, `comm` (byte counts), `scale_update` (`tables`, `mlp`), `clipped` |
//! | `eval`    | `iteration`, `epoch`, `train_acc`, `train_auc`, `test_loss`, `test_acc`, `test_auc` |
//! | `summary` | `iterations`, `final_train_loss`, `test_acc`, `test_auc`, `train_acc`, `comm_bytes`, `model_bytes` |
//!
//! AUC fields are `null` when a split holds a single class. Keys inside an
//! object are emitted in sorted order and no wall-clock values are logged,
//! so identical runs produce identical files.

use std::collections::BTreeMap;
use std::io::Write;

use dqrm_core::comm::CommRecord;
use dqrm_core::model::ScaleUpdate;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const KINDS: [&str; 4] = ["config", "train", "eval", "summary"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommBytes {
    pub dense_grad: u64,
    pub sparse_index: u64,
    pub sparse_value: u64,
    pub scale: u64,
    /// Phase 1 (scale unification).
    pub phase1: u64,
    /// Phase 2 (gradient payload).
    pub phase2: u64,
    pub total: u64,
}

impl From<CommRecord> for CommBytes {
    fn from(r: CommRecord) -> Self {
        CommBytes {
            dense_grad: r.dense_grad_bytes,
            sparse_index: r.sparse_index_bytes,
            sparse_value: r.sparse_value_bytes,
            scale: r.scale_bytes,
            phase1: r.scale_bytes,
            phase2: r.total() - r.scale_bytes,
            total: r.total(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleEvents {
    pub tables: u64,
    pub mlp: bool,
}

impl From<ScaleUpdate> for ScaleEvents {
    fn from(u: ScaleUpdate) -> Self {
        ScaleEvents {
            tables: u.tables as u64,
            mlp: u.mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Config {
        config: BTreeMap<String, String>,
    },
    Train {
        iteration: u64,
        epoch: u32,
        train_loss: f64,
        comm: CommBytes,
        scale_update: ScaleEvents,
        clipped: u64,
    },
    Eval {
        iteration: u64,
        epoch: u32,
        train_acc: f64,
        train_auc: Option<f64>,
        test_loss: f64,
        test_acc: f64,
        test_auc: Option<f64>,
    },
    Summary {
        iterations: u64,
        final_train_loss: f64,
        train_acc: f64,
        test_acc: f64,
        test_auc: Option<f64>,
        comm_bytes: u64,
        model_bytes: u64,
    },
}

impl LogRecord {
    pub fn kind(&self) -> &'static str {
        match self {
            LogRecord::Config { .. } => "config",
            LogRecord::Train { .. } => "train",
            LogRecord::Eval { .. } => "eval",
            LogRecord::Summary { .. } => "summary",
        }
    }

    pub fn iteration(&self) -> Option<u64> {
        match self {
            LogRecord::Train { iteration, .. } | LogRecord::Eval { iteration, .. } => Some(*iteration),
            _ => None,
        }
    }

    pub fn to_line(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(|e| Error::Log(e.to_string()))?;
        Ok(value.to_string())
    }
}

/// Builds a log line from a kind and a loose field map, checking it against
/// the schema.
pub fn log_record(kind: &str, fields: Map<String, Value>) -> Result<String> {
    if !KINDS.contains(&kind) {
        return Err(Error::Log(format!("unknown record kind {kind:?}")));
    }
    let mut obj = fields;
    obj.insert("kind".into(), Value::String(kind.into()));
    let rec: LogRecord = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Log(e.to_string()))?;
    rec.to_line()
}

pub fn parse_record(line: &str) -> Result<LogRecord> {
    serde_json::from_str(line).map_err(|e| Error::Log(e.to_string()))
}

/// Appends records, rejecting iteration numbers that go backwards.
pub struct MetricsLog<W> {
    out: W,
    last_iteration: Option<u64>,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W) -> Self {
        MetricsLog {
            out,
            last_iteration: None,
        }
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<()> {
        if let (Some(it), Some(last)) = (rec.iteration(), self.last_iteration) {
            if it < last {
                return Err(Error::Log(format!("iteration {it} after {last}")));
            }
        }
        if let Some(it) = rec.iteration() {
            self.last_iteration = Some(it);
        }
        let line = rec.to_line()?;
        writeln!(self.out, "{line}").map_err(|e| Error::Log(e.to_string()))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
