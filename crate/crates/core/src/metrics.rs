//! Ranking and classification measures.

use std::collections::BTreeSet;
use std::io::Write;

use thiserror::Error;

use crate::numerics::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} is undefined: {1}")]
    Undefined(&'static str, &'static str),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("non-finite score")]
    NonFinite,
}

/// Candidates in descending score order with the ground-truth relevant set.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult<T> {
    pub ranked: Vec<(String, T)>,
    pub relevant: BTreeSet<String>,
}

impl<T: Scalar> RankedResult<T> {
    /// Sorts by descending score; equal scores keep their input order.
    pub fn from_scores(mut scored: Vec<(String, T)>, relevant: BTreeSet<String>) -> Result<Self, MetricError> {
        if scored.iter().any(|(_, s)| !s.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite"));
        Ok(Self {
            ranked: scored,
            relevant,
        })
    }

    fn hits(&self) -> impl Iterator<Item = bool> + '_ {
        self.ranked.iter().map(|(id, _)| self.relevant.contains(id))
    }

    pub fn top_k(&self, k: usize) -> Vec<&str> {
        self.ranked.iter().take(k).map(|(id, _)| id.as_str()).collect()
    }
}

/// Mann–Whitney AUC: the chance a positive outscores a negative, ties count half.
pub fn auc<T: Scalar>(pos: &[T], neg: &[T]) -> Result<f64, MetricError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::Undefined("AUC", "needs at least one positive and one negative"));
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|s| (s.as_f64(), true))
        .chain(neg.iter().map(|s| (s.as_f64(), false)))
        .collect();
    if all.iter().any(|(s, _)| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    // twice the rank sum keeps tied mid-ranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u128;
        let positives = all[i..j].iter().filter(|(_, p)| *p).count() as u128;
        twice_rank_sum += twice_mid * positives;
        i = j;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn precision_recall_f1<T: Scalar>(result: &RankedResult<T>, k: usize) -> Result<PrecisionRecall, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if result.relevant.is_empty() {
        return Err(MetricError::Undefined("recall", "relevant set is empty"));
    }
    let hits = result.hits().take(k).filter(|&h| h).count() as f64;
    let precision = hits / k as f64;
    let recall = hits / result.relevant.len() as f64;
    let f1 = if hits == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrecisionRecall { precision, recall, f1 })
}

pub fn average_precision<T: Scalar>(result: &RankedResult<T>) -> Result<f64, MetricError> {
    if result.relevant.is_empty() {
        return Err(MetricError::Undefined("average precision", "relevant set is empty"));
    }
    let mut found = 0usize;
    let mut total = 0.0;
    for (rank, hit) in result.hits().enumerate() {
        if hit {
            found += 1;
            total += found as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / result.relevant.len() as f64)
}

pub fn mean_average_precision<T: Scalar>(results: &[RankedResult<T>]) -> Result<f64, MetricError> {
    if results.is_empty() {
        return Err(MetricError::Undefined("MAP", "no queries"));
    }
    let mut sum = 0.0;
    for r in results {
        sum += average_precision(r)?;
    }
    Ok(sum / results.len() as f64)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, k: Option<usize>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            k,
            value,
        }
    }
}

/// CSV `metric,k,value`; `k` is empty for rank-free metrics.
pub fn write_report<W: Write>(mut w: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "metric,k,value")?;
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{:.6}", r.metric, k, r.value)?;
    }
    Ok(())
}
