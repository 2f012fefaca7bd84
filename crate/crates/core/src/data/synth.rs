use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::features::{dense_transform, RawRecord, Sample};
use crate::error::{Error, Result};

/// Parameters of the synthetic click-log generator.
///
/// Categorical indices are Zipf-distributed per table. Labels come from a
/// fixed hidden logistic model: per-row effects on a few planted tables, one
/// planted pairwise interaction and a linear term over dense features. Each
/// label is then flipped with probability `label_noise`. All remaining
/// tables carry no signal, which is what makes large tables easy to overfit.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub table_rows: Vec<usize>,
    pub dense_features: usize,
    pub zipf_skew: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.table_rows.is_empty() || self.table_rows.contains(&0) {
            return Err(Error::Config("table rows must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label noise {} outside [0, 1]",
                self.label_noise
            )));
        }
        if self.zipf_skew.is_nan() || self.zipf_skew < 0.0 {
            return Err(Error::Config("zipf skew must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generated record before feature transformation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthRecord {
    pub label: u8,
    pub dense: Vec<Option<i64>>,
    pub categorical: Vec<u32>,
}

impl SynthRecord {
    /// Uses the generated indices directly.
    pub fn to_sample(&self) -> Sample {
        Sample {
            label: f32::from(self.label),
            dense: self.dense.iter().map(|&v| dense_transform(v)).collect(),
            categorical: self.categorical.clone(),
        }
    }

    /// Criteo-layout record with each index written as 8 hex digits.
    pub fn to_raw(&self) -> RawRecord {
        RawRecord {
            label: self.label,
            dense: self.dense.clone(),
            categorical: self
                .categorical
                .iter()
                .map(|i| Some(format!("{i:08x}")))
                .collect::<Vec<Option<String>>>(),
        }
    }
}

const PLANTED_TABLES: usize = 3;
const PLANTED_WEIGHT: f64 = 1.5;
const INTERACTION_WEIGHT: f64 = 1.0;
const DENSE_WEIGHT: f64 = 0.3;
const BIAS: f64 = -0.8;
const MISSING_DENSE: f64 = 0.05;

pub struct SyntheticStream {
    spec: SynthSpec,
    rng: ChaCha8Rng,
    zipf: Vec<Zipf<f64>>,
    dense_weights: Vec<f64>,
    emitted: usize,
}

pub fn generate_synthetic(spec: SynthSpec) -> Result<SyntheticStream> {
    spec.validate()?;
    let zipf = spec
        .table_rows
        .iter()
        .map(|&rows| Zipf::new(rows as f64, spec.zipf_skew).map_err(|e| Error::Config(format!("zipf: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dense_weights = (0..spec.dense_features)
        .map(|_| rng.random_range(-DENSE_WEIGHT..DENSE_WEIGHT))
        .collect();
    Ok(SyntheticStream {
        spec,
        rng,
        zipf,
        dense_weights,
        emitted: 0,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SyntheticStream {
    /// Hidden per-row effect in `[-1, 1)`, a pure function of (seed, table, row).
    fn row_effect(&self, table: usize, row: u32) -> f64 {
        let h = splitmix64(self.spec.seed ^ splitmix64((table as u64) << 32 | u64::from(row)));
        (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    fn hidden_logit(&self, dense: &[f32], cat: &[u32]) -> f64 {
        let planted = PLANTED_TABLES.min(cat.len());
        let mut logit = BIAS;
        for (t, &row) in cat.iter().enumerate().take(planted) {
            logit += PLANTED_WEIGHT * self.row_effect(t, row);
        }
        if cat.len() >= 2 {
            logit += INTERACTION_WEIGHT * self.row_effect(100, cat[0]) * self.row_effect(101, cat[1]);
        }
        for (w, &x) in self.dense_weights.iter().zip(dense) {
            logit += w * (f64::from(x) - 2.0);
        }
        logit
    }
}

impl Iterator for SyntheticStream {
    type Item = SynthRecord;

    fn next(&mut self) -> Option<SynthRecord> {
        if self.emitted >= self.spec.num_samples {
            return None;
        }
        self.emitted += 1;
        let rng = &mut self.rng;
        let dense: Vec<Option<i64>> = (0..self.spec.dense_features)
            .map(|_| {
                let u: f64 = rng.random();
                let missing = rng.random_bool(MISSING_DENSE);
                let v = num_traits::Float::floor(libm::exp(u * 4.0)) as i64 - 1;
                (!missing).then_some(v)
            })
            .collect();
        let categorical: Vec<u32> = self
            .zipf
            .iter()
            .zip(&self.spec.table_rows)
            .map(|(z, &rows)| {
                let k = z.sample(rng) as usize;
                (k.clamp(1, rows) - 1) as u32
            })
            .collect();
        let dense_f: Vec<f32> = dense.iter().map(|&v| dense_transform(v)).collect();
        let p = 1.0 / (1.0 + libm::exp(-self.hidden_logit(&dense_f, &categorical)));
        let rng = &mut self.rng;
        let mut label = rng.random_bool(p);
        if rng.random_bool(self.spec.label_noise) {
            label = !label;
        }
        Some(SynthRecord {
            label: u8::from(label),
            dense,
            categorical,
        })
    }
}
