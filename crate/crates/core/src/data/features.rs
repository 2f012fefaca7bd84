use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One click-log record as it appears in the Criteo layout: a label,
/// integer features and hex-string categorical features, any of which may
/// be missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub label: u8,
    pub dense: Vec<Option<i64>>,
    pub categorical: Vec<Option<String>>,
}

/// A record after feature transformation: ready to batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub label: f32,
    pub dense: Vec<f32>,
    /// One row index per embedding table.
    pub categorical: Vec<u32>,
}

impl RawRecord {
    pub fn to_sample(&self, table_rows: &[usize]) -> Result<Sample> {
        if table_rows.len() != self.categorical.len() {
            return Err(Error::shape(self.categorical.len(), table_rows.len()));
        }
        Ok(Sample {
            label: f32::from(self.label),
            dense: self.dense.iter().map(|&v| dense_transform(v)).collect(),
            categorical: self
                .categorical
                .iter()
                .zip(table_rows)
                .map(|(field, &rows)| hash_categorical(field.as_deref(), rows))
                .collect(),
        })
    }
}

/// `ln(1 + max(x, 0))`; missing values map to 0.
pub fn dense_transform(value: Option<i64>) -> f32 {
    match value {
        Some(v) if v > 0 => libm::log1p(v as f64) as f32,
        _ => 0.0,
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Maps a raw categorical value to a table row: FNV-1a over the bytes,
/// modulo the row count. Missing values map to row 0.
pub fn hash_categorical(field: Option<&str>, table_rows: usize) -> u32 {
    match field {
        Some(s) if !s.is_empty() && table_rows > 0 => (fnv1a64(s.as_bytes()) % table_rows as u64) as u32,
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    // Independent FNV-1a: 128-bit product reduced mod 2^64.
    fn oracle_fnv(bytes: &[u8]) -> u64 {
        let mut h: u128 = 14695981039346656037;
        for &b in bytes {
            h ^= u128::from(b);
            h = (h * 1099511628211) % (1u128 << 64);
        }
        h as u64
    }

    #[test]
    fn fnv_test_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        assert_eq!(fnv1a64(b"ab"), oracle_fnv(b"ab"));
        assert_eq!(hash_categorical(Some("ab"), 97), (oracle_fnv(b"ab") % 97) as u32);
    }

    #[test]
    fn hashing_edge_cases() {
        assert_eq!(hash_categorical(None, 1000), 0);
        assert_eq!(hash_categorical(Some(""), 1000), 0);
        assert_eq!(hash_categorical(Some("68fd1e64"), 1), 0);
        assert!(hash_categorical(Some("68fd1e64"), 1000) < 1000);
    }

    #[test]
    fn dense_examples() {
        assert_eq!(dense_transform(Some(0)), 0.0);
        assert_eq!(dense_transform(None), 0.0);
        assert_eq!(dense_transform(Some(-5)), 0.0);
        assert!((dense_transform(Some(1)) - core::f32::consts::LN_2).abs() < 1e-7);
        // ln(1 + (e - 1)) = 1 for the real-valued transform
        let e_minus_1 = core::f64::consts::E - 1.0;
        assert!((libm::log1p(e_minus_1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn record_to_sample() {
        let rec = RawRecord {
            label: 1,
            dense: vec![Some(0), None],
            categorical: vec![None, Some("ab".to_string())],
        };
        let s = rec.to_sample(&[10, 97]).unwrap();
        assert_eq!(s.label, 1.0);
        assert_eq!(s.dense, vec![0.0, 0.0]);
        assert_eq!(s.categorical, vec![0, (oracle_fnv(b"ab") % 97) as u32]);
        assert!(rec.to_sample(&[10]).is_err());
    }
}
