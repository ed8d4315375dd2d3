//! Recommendation metrics: per-visit F1/Jaccard/Recall/Precision/#Med and
//! their aggregates.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Predictions for one visit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecommendationResult {
    pub patient_id: String,
    pub visit_index: u32,
    pub predicted: BTreeSet<String>,
    pub truth: BTreeSet<String>,
    /// logprob(Yes) - logprob(No) per candidate medication.
    pub margins: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricRow {
    pub f1: f64,
    pub jaccard: f64,
    pub recall: f64,
    pub precision: f64,
    /// Predicted-set size; for aggregates, the mean predicted-set size.
    pub n_med: f64,
}

/// Per-visit metrics. Conventions: a ratio with an empty denominator set is
/// 0 (empty prediction -> precision 0, empty truth -> recall 0, both empty
/// -> jaccard 0), and F1 is 0 when precision and recall are both 0. Visits
/// with empty truth are skipped and counted by the split evaluator; the
/// function itself is total.
pub fn visit_metrics(result: &RecommendationResult) -> MetricRow {
    let p = &result.predicted;
    let t = &result.truth;
    let inter = p.intersection(t).count() as f64;
    let union = p.union(t).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
    let recall = if t.is_empty() { 0.0 } else { inter / t.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricRow {
        f1,
        jaccard: if union == 0.0 { 0.0 } else { inter / union },
        recall,
        precision,
        n_med: p.len() as f64,
    }
}

/// Unweighted mean of each field over visits (the headline aggregate).
pub fn aggregate_metrics(rows: &[MetricRow]) -> Result<MetricRow> {
    if rows.is_empty() {
        return Err(Error::Eval("no metric rows to aggregate".into()));
    }
    let n = rows.len() as f64;
    Ok(MetricRow {
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        jaccard: rows.iter().map(|r| r.jaccard).sum::<f64>() / n,
        recall: rows.iter().map(|r| r.recall).sum::<f64>() / n,
        precision: rows.iter().map(|r| r.precision).sum::<f64>() / n,
        n_med: rows.iter().map(|r| r.n_med).sum::<f64>() / n,
    })
}

/// Micro-averaged counterpart: metrics over pooled counts across visits.
pub fn pooled_metrics(results: &[RecommendationResult]) -> MetricRow {
    let mut inter = 0.0;
    let mut n_pred = 0.0;
    let mut n_truth = 0.0;
    let mut union = 0.0;
    for r in results {
        inter += r.predicted.intersection(&r.truth).count() as f64;
        union += r.predicted.union(&r.truth).count() as f64;
        n_pred += r.predicted.len() as f64;
        n_truth += r.truth.len() as f64;
    }
    let precision = if n_pred == 0.0 { 0.0 } else { inter / n_pred };
    let recall = if n_truth == 0.0 { 0.0 } else { inter / n_truth };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricRow {
        f1,
        jaccard: if union == 0.0 { 0.0 } else { inter / union },
        recall,
        precision,
        n_med: if results.is_empty() { 0.0 } else { n_pred / results.len() as f64 },
    }
}

/// Binary-classification F1 over labelled Yes/No decisions (the per-group
/// validation measure and the per-medication-subset measure).
pub fn binary_f1(decisions: &[(bool, bool)]) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fun = 0.0;
    for &(predicted, label) in decisions {
        match (predicted, label) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fun += 1.0,
            (false, false) => {}
        }
    }
    if 2.0 * tp + fp + fun == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fun)
    }
}
