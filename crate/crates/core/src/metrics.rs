//! Evaluation metrics: thresholded accuracy and exact rank-based ROC AUC.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Fraction of samples where `(score >= threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= threshold) == (y != 0))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from the rank sum of positives with tied
/// scores sharing their average rank.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite);
    }
    let positives = labels.iter().filter(|&&y| y != 0).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Twice the positive rank sum keeps averaged half-ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share (start + 1 + end) / 2
        let twice_avg = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] != 0).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        start = end;
    }
    let twice_u = twice_rank_sum - positives * (positives + 1);
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Mergeable evaluation buffer for sharded evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalAccumulator {
    scores: Vec<f64>,
    labels: Vec<u8>,
    loss_sum: f64,
    loss_count: u64,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn add_loss(&mut self, loss_sum: f64, count: u64) {
        self.loss_sum += loss_sum;
        self.loss_count += count;
    }

    pub fn merge(&mut self, other: EvalAccumulator) {
        self.scores.extend(other.scores);
        self.labels.extend(other.labels);
        self.loss_sum += other.loss_sum;
        self.loss_count += other.loss_count;
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn accuracy(&self) -> Result<f64> {
        accuracy(&self.scores, &self.labels, DEFAULT_THRESHOLD)
    }

    pub fn roc_auc(&self) -> Result<f64> {
        roc_auc(&self.scores, &self.labels)
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64)
    }
}
