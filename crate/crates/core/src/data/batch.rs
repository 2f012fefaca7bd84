use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use super::features::Sample;
use crate::error::{Error, Result};

/// A minibatch in embedding-bag layout: for every table, a flat index list
/// plus per-sample offsets (`offsets[t][b]..offsets[t][b + 1]` is sample
/// `b`'s bag).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dense_features: usize,
    /// Row-major `len x dense_features`.
    pub dense: Vec<f32>,
    pub indices: Vec<Vec<u32>>,
    pub offsets: Vec<Vec<usize>>,
    pub labels: Vec<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Batch("empty batch".into()))?;
        let dense_features = first.dense.len();
        let tables = first.categorical.len();
        let mut batch = Batch {
            dense_features,
            dense: Vec::with_capacity(samples.len() * dense_features),
            indices: (0..tables).map(|_| Vec::with_capacity(samples.len())).collect(),
            offsets: (0..tables)
                .map(|_| {
                    let mut o = Vec::with_capacity(samples.len() + 1);
                    o.push(0);
                    o
                })
                .collect(),
            labels: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.dense.len() != dense_features {
                return Err(Error::shape(dense_features, s.dense.len()));
            }
            if s.categorical.len() != tables {
                return Err(Error::shape(tables, s.categorical.len()));
            }
            batch.dense.extend_from_slice(&s.dense);
            for (t, &idx) in s.categorical.iter().enumerate() {
                batch.indices[t].push(idx);
                batch.offsets[t].push(batch.indices[t].len());
            }
            batch.labels.push(s.label);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_tables(&self) -> usize {
        self.indices.len()
    }

    /// Bag of sample `b` in table `t`.
    pub fn bag(&self, table: usize, sample: usize) -> &[u32] {
        let o = &self.offsets[table];
        &self.indices[table][o[sample]..o[sample + 1]]
    }

    /// Checks offsets, label range and index bounds against table sizes.
    pub fn validate(&self, table_rows: &[usize]) -> Result<()> {
        let n = self.len();
        if self.dense.len() != n * self.dense_features {
            return Err(Error::shape(n * self.dense_features, self.dense.len()));
        }
        if self.num_tables() != table_rows.len() || self.offsets.len() != table_rows.len() {
            return Err(Error::shape(table_rows.len(), self.num_tables()));
        }
        for (t, &rows) in table_rows.iter().enumerate() {
            let o = &self.offsets[t];
            if o.len() != n + 1 || o[0] != 0 || o[n] != self.indices[t].len() {
                return Err(Error::Batch(format!("bad offsets for table {t}")));
            }
            if o.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Batch(format!("offsets not monotone for table {t}")));
            }
            if let Some(&bad) = self.indices[t].iter().find(|&&i| i as usize >= rows) {
                return Err(Error::IndexOutOfRange {
                    index: u64::from(bad),
                    rows,
                });
            }
        }
        if self.labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Batch("labels must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Samples `range` as a new batch.
    pub fn slice(&self, range: Range<usize>) -> Batch {
        let d = self.dense_features;
        let mut indices = Vec::with_capacity(self.num_tables());
        let mut offsets = Vec::with_capacity(self.num_tables());
        for t in 0..self.num_tables() {
            let o = &self.offsets[t];
            let (lo, hi) = (o[range.start], o[range.end]);
            indices.push(self.indices[t][lo..hi].to_vec());
            offsets.push(o[range.start..=range.end].iter().map(|x| x - lo).collect());
        }
        Batch {
            dense_features: d,
            dense: self.dense[range.start * d..range.end * d].to_vec(),
            indices,
            offsets,
            labels: self.labels[range].to_vec(),
        }
    }

    /// Splits into `parts` equal contiguous shards in rank order.
    pub fn shard(&self, parts: usize) -> Result<Vec<Batch>> {
        if parts == 0 || !self.len().is_multiple_of(parts) {
            return Err(Error::Batch(format!(
                "batch of {} cannot be split evenly across {parts} nodes",
                self.len()
            )));
        }
        let per = self.len() / parts;
        Ok((0..parts).map(|r| self.slice(r * per..(r + 1) * per)).collect())
    }

    /// Back to single-hot samples; `None` if any bag is not single-hot.
    pub fn to_samples(&self) -> Option<Vec<Sample>> {
        let d = self.dense_features;
        (0..self.len())
            .map(|b| {
                let categorical = (0..self.num_tables())
                    .map(|t| match self.bag(t, b) {
                        [i] => Some(*i),
                        _ => None,
                    })
                    .collect::<Option<Vec<u32>>>()?;
                Some(Sample {
                    label: self.labels[b],
                    dense: self.dense[b * d..(b + 1) * d].to_vec(),
                    categorical,
                })
            })
            .collect()
    }
}

/// Order-preserving batching iterator.
pub struct Batches<I> {
    inner: I,
    batch_size: usize,
    drop_last: bool,
}

impl<I: Iterator<Item = Sample>> Iterator for Batches<I> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let chunk: Vec<Sample> = self.inner.by_ref().take(self.batch_size).collect();
        if chunk.is_empty() || (self.drop_last && chunk.len() < self.batch_size) {
            return None;
        }
        Batch::from_samples(&chunk).ok()
    }
}

pub fn make_batches<I>(samples: I, batch_size: usize, drop_last: bool) -> Batches<I::IntoIter>
where
    I: IntoIterator<Item = Sample>,
{
    assert!(batch_size > 0, "batch size must be positive");
    Batches {
        inner: samples.into_iter(),
        batch_size,
        drop_last,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample(i: u32) -> Sample {
        Sample {
            label: (i % 2) as f32,
            dense: vec![i as f32, 0.5],
            categorical: vec![i, i * 2],
        }
    }

    #[test]
    fn batch_counts() {
        let s: Vec<Sample> = (0..10).map(sample).collect();
        assert_eq!(make_batches(s.clone(), 4, true).count(), 2);
        assert_eq!(make_batches(s.clone(), 4, false).count(), 3);
        let singles: Vec<Batch> = make_batches(s.clone(), 1, false).collect();
        assert_eq!(singles.len(), 10);
        assert!(singles.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn batches_round_trip() {
        let s: Vec<Sample> = (0..10).map(sample).collect();
        let back: Vec<Sample> = make_batches(s.clone(), 3, false)
            .flat_map(|b| b.to_samples().unwrap())
            .collect();
        assert_eq!(back, s);
    }

    #[test]
    fn shard_and_validate() {
        let s: Vec<Sample> = (0..8).map(sample).collect();
        let b = Batch::from_samples(&s).unwrap();
        b.validate(&[8, 16]).unwrap();
        assert!(matches!(
            b.validate(&[8, 10]),
            Err(Error::IndexOutOfRange { index: 10, rows: 10 })
        ));
        let shards = b.shard(4).unwrap();
        assert_eq!(shards.len(), 4);
        assert_eq!(shards[2].to_samples().unwrap(), s[4..6].to_vec());
        for sh in &shards {
            sh.validate(&[8, 16]).unwrap();
        }
        assert!(b.shard(3).is_err());
    }

    #[test]
    fn multi_hot_bags() {
        let b = Batch {
            dense_features: 1,
            dense: vec![0.0, 1.0],
            indices: vec![vec![1, 2, 3]],
            offsets: vec![vec![0, 2, 3]],
            labels: vec![0.0, 1.0],
        };
        b.validate(&[4]).unwrap();
        assert_eq!(b.bag(0, 0), &[1, 2]);
        assert!(b.to_samples().is_none());
        let tail = b.slice(1..2);
        assert_eq!(tail.offsets[0], vec![0, 1]);
        assert_eq!(tail.indices[0], vec![3]);
    }
}
