//! Evaluation metrics for pertinent positives.
//!
//! * `# PP Feat`: mean number of selected superpixels.
//! * `PP Acc`: percentage of explanations whose masked image keeps the
//!   original class.
//! * `PP Corr`: Spearman correlation between the addition index and the rank
//!   of the original-class score after each addition (rank 1 = highest
//!   score). A score that rises with every addition gives exactly -1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub n_selected: usize,
    pub predicted: usize,
    pub t0: usize,
    /// Original-class score after each addition.
    pub score_trace: Vec<f64>,
}

fn non_empty(batch: &[ExplanationRecord]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("metrics need a non-empty batch".into()));
    }
    Ok(())
}

pub fn pp_feature_count(batch: &[ExplanationRecord]) -> Result<f64> {
    non_empty(batch)?;
    Ok(batch.iter().map(|r| r.n_selected as f64).sum::<f64>() / batch.len() as f64)
}

pub fn pp_accuracy(batch: &[ExplanationRecord]) -> Result<f64> {
    non_empty(batch)?;
    let hits = batch.iter().filter(|r| r.predicted == r.t0).count();
    Ok(100.0 * hits as f64 / batch.len() as f64)
}

/// 1-based ranks in descending order of value; tied values share the mean rank.
pub fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end (0-based) share ranks start+1..=end.
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean_rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// `None` for traces shorter than two or with all scores tied.
pub fn pp_correlation(trace: &[f64]) -> Option<f64> {
    if trace.len() < 2 || trace.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let index: Vec<f64> = (1..=trace.len()).map(|i| i as f64).collect();
    pearson(&index, &descending_ranks(trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub n_examples: usize,
    pub pp_feat: f64,
    pub pp_acc: f64,
    /// Mean over examples with a defined correlation.
    pub pp_corr: Option<f64>,
}

/// One table row per method, in input order.
pub fn aggregate_report(methods: &[(String, Vec<ExplanationRecord>)]) -> Result<Vec<MetricRow>> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods to compare".into()));
    }
    methods
        .iter()
        .map(|(method, batch)| {
            if batch.is_empty() {
                return Err(Error::InvalidArgument(format!("method {method:?} has no records")));
            }
            let corrs: Vec<f64> = batch
                .iter()
                .filter_map(|r| pp_correlation(&r.score_trace))
                .collect();
            Ok(MetricRow {
                method: method.clone(),
                n_examples: batch.len(),
                pp_feat: pp_feature_count(batch)?,
                pp_acc: pp_accuracy(batch)?,
                pp_corr: (!corrs.is_empty()).then(|| corrs.iter().sum::<f64>() / corrs.len() as f64),
            })
        })
        .collect()
}
