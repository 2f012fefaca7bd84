//! Run configuration: plain `key = value` lines, `#` comments. Command-line
//! overrides are applied after the file and win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dqrm_core::comm::{DpConfig, EcMode};
use dqrm_core::data::SynthSpec;
use dqrm_core::model::{ModelConfig, KAGGLE_TABLE_ROWS};
use dqrm_core::quantizer::Granularity;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dense_in: usize,
    pub table_rows: Vec<usize>,
    pub embed_dim: usize,
    /// Including the input width, e.g. `13-512-256-64-16`.
    pub bottom_mlp: Vec<usize>,
    /// Without the input width (derived from the interaction), e.g. `512-256-1`.
    pub top_mlp: Vec<usize>,
    pub emb_bits: u32,
    pub mlp_bits: u32,
    pub mlp_granularity: Granularity,
    pub update_period: u32,
    pub learning_rate: f32,
    pub quantize_activations: bool,
    pub pretrain_epochs: u32,

    pub nodes: usize,
    pub grad_bits: u32,
    pub ec: EcMode,
    pub sparse_emb: bool,
    pub index_bytes: usize,
    /// Single replica with gradient accumulation instead of N replicas.
    pub simulated: bool,

    pub epochs: u32,
    pub batch_size: usize,
    /// Extra evaluations every this many iterations (0: end of epoch only).
    pub eval_every: u64,
    pub seed: u64,
    pub histogram_bins: usize,

    /// Criteo TSV files; synthetic data when empty.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub samples: usize,
    pub test_fraction: f64,
    pub zipf_skew: f64,
    pub label_noise: f64,
    pub data_seed: Option<u64>,

    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dense_in: 13,
            table_rows: vec![1000, 1000, 500, 200, 100, 50, 20, 10],
            embed_dim: 16,
            bottom_mlp: vec![13, 64, 16],
            top_mlp: vec![64, 1],
            emb_bits: 4,
            mlp_bits: 4,
            mlp_granularity: Granularity::PerChannel,
            update_period: 1,
            learning_rate: 0.1,
            quantize_activations: false,
            pretrain_epochs: 0,
            nodes: 1,
            grad_bits: 32,
            ec: EcMode::None,
            sparse_emb: true,
            index_bytes: 8,
            simulated: false,
            epochs: 1,
            batch_size: 128,
            eval_every: 0,
            seed: 1,
            histogram_bins: 0,
            train_data: None,
            test_data: None,
            samples: 20_000,
            test_fraction: 0.2,
            zipf_skew: 1.05,
            label_noise: 0.0,
            data_seed: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected on/off")),
    }
}

fn list(key: &str, value: &str, sep: char) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(sep).map(|v| num(key, v.trim())).collect()
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

pub fn ec_name(e: EcMode) -> &'static str {
    match e {
        EcMode::None => "none",
        EcMode::Mlp => "mlp",
        EcMode::All => "all",
    }
}

fn granularity_name(g: Granularity) -> &'static str {
    match g {
        Granularity::PerTensor => "matrix",
        _ => "channel",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dense_in" => self.dense_in = num(key, v)?,
            "table_rows" if v == "kaggle" => self.table_rows = KAGGLE_TABLE_ROWS.to_vec(),
            "table_rows" => self.table_rows = list(key, v, ',')?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "bottom_mlp" => self.bottom_mlp = list(key, v, '-')?,
            "top_mlp" => self.top_mlp = list(key, v, '-')?,
            "emb_bits" => self.emb_bits = num(key, v)?,
            "mlp_bits" => self.mlp_bits = num(key, v)?,
            "mlp_granularity" => {
                self.mlp_granularity = match v {
                    "channel" => Granularity::PerChannel,
                    "matrix" | "tensor" => Granularity::PerTensor,
                    _ => return Err(bad(key, v, "expected channel or matrix")),
                }
            }
            "update_period" => self.update_period = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "quantize_activations" => self.quantize_activations = flag(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, v)?,
            "nodes" => self.nodes = num(key, v)?,
            "grad_bits" => self.grad_bits = num(key, v)?,
            "ec" => {
                self.ec = match v {
                    "none" => EcMode::None,
                    "mlp" => EcMode::Mlp,
                    "all" => EcMode::All,
                    _ => return Err(bad(key, v, "expected none, mlp or all")),
                }
            }
            "sparse_emb" => self.sparse_emb = flag(key, v)?,
            "index_bytes" => self.index_bytes = num(key, v)?,
            "simulated" => self.simulated = flag(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "histogram_bins" => self.histogram_bins = num(key, v)?,
            "train_data" => self.train_data = path(v),
            "test_data" => self.test_data = path(v),
            "samples" => self.samples = num(key, v)?,
            "test_fraction" => self.test_fraction = num(key, v)?,
            "zipf_skew" => self.zipf_skew = num(key, v)?,
            "label_noise" => self.label_noise = num(key, v)?,
            "data_seed" => self.data_seed = Some(num(key, v)?),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every experiment setting as strings. The output directory is left
    /// out: it says where results go, not what was run.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let entries: [(&str, String); 31] = [
            ("dense_in", self.dense_in.to_string()),
            ("table_rows", join(&self.table_rows, ",")),
            ("embed_dim", self.embed_dim.to_string()),
            ("bottom_mlp", join(&self.bottom_mlp, "-")),
            ("top_mlp", join(&self.top_mlp, "-")),
            ("emb_bits", self.emb_bits.to_string()),
            ("mlp_bits", self.mlp_bits.to_string()),
            ("mlp_granularity", granularity_name(self.mlp_granularity).into()),
            ("update_period", self.update_period.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("quantize_activations", self.quantize_activations.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("nodes", self.nodes.to_string()),
            ("grad_bits", self.grad_bits.to_string()),
            ("ec", ec_name(self.ec).into()),
            ("sparse_emb", self.sparse_emb.to_string()),
            ("index_bytes", self.index_bytes.to_string()),
            ("simulated", self.simulated.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
            ("histogram_bins", self.histogram_bins.to_string()),
            ("train_data", opt_path(&self.train_data)),
            ("test_data", opt_path(&self.test_data)),
            ("samples", self.samples.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("zipf_skew", self.zipf_skew.to_string()),
            ("label_noise", self.label_noise.to_string()),
            ("data_seed", self.data_seed().to_string()),
            ("top_input", self.model_config().top_input_dim().to_string()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
    }

    /// Key = value text that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            if k != "top_input" {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        out
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dense_in: self.dense_in,
            table_rows: self.table_rows.clone(),
            embed_dim: self.embed_dim,
            bottom_arch: self.bottom_mlp.clone(),
            top_arch: self.top_mlp.clone(),
            emb_bits: self.emb_bits,
            mlp_bits: self.mlp_bits,
            mlp_granularity: self.mlp_granularity,
            update_period: self.update_period,
            learning_rate: self.learning_rate,
            quantize_activations: self.quantize_activations,
            pretrain_epochs: self.pretrain_epochs,
        }
    }

    pub fn dp_config(&self) -> DpConfig {
        DpConfig {
            nodes: self.nodes,
            grad_bits: self.grad_bits,
            ec_mode: self.ec,
            sparse_emb: self.sparse_emb,
            index_bytes: self.index_bytes,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_samples: self.samples,
            table_rows: self.table_rows.clone(),
            dense_features: self.dense_in,
            zipf_skew: self.zipf_skew,
            label_noise: self.label_noise,
            seed: self.data_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.dp_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.batch_size.is_multiple_of(self.nodes) {
            return Err(Error::Config(format!(
                "batch_size {} not divisible by {} nodes",
                self.batch_size, self.nodes
            )));
        }
        if self.train_data.is_none() {
            self.synth_spec().validate()?;
            if !(0.0..1.0).contains(&self.test_fraction) {
                return Err(Error::Config("test_fraction must be in [0, 1)".into()));
            }
        }
        Ok(())
    }
}
