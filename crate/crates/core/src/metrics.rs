//! Registration metrics over collections of pair results.
//!
//! Errors are pooled per tie point across all non-failed pairs. Failed
//! pairs contribute only to the failure rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PairResult;

pub const DEFAULT_SUCCESS_TAUS: [f64; 2] = [5.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessAt {
    pub tau: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// `None` when no pair produced evaluable points.
    pub mean_error: Option<f64>,
    pub success_at: Vec<SuccessAt>,
    pub failure_rate: f64,
    pub pair_count: usize,
    pub evaluated_point_count: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no results to summarize")]
    Empty,
    #[error("every pair failed; no evaluable points")]
    NoEvaluablePoints { summary: MetricSummary },
}

impl MetricSummary {
    pub fn success(&self, tau: f64) -> Option<f64> {
        self.success_at
            .iter()
            .find(|s| s.tau == tau)
            .map(|s| s.fraction)
    }

    /// Point-weighted merge of error statistics and pair-weighted merge of
    /// the failure rate. Both summaries must use the same thresholds.
    pub fn combine(&self, other: &MetricSummary) -> MetricSummary {
        let points = self.evaluated_point_count + other.evaluated_point_count;
        let pairs = self.pair_count + other.pair_count;
        let weighted = |a: f64, na: usize, b: f64, nb: usize| {
            if na + nb == 0 {
                0.0
            } else {
                (a * na as f64 + b * nb as f64) / (na + nb) as f64
            }
        };
        let mean_error = match (self.mean_error, other.mean_error) {
            (Some(a), Some(b)) => Some(weighted(
                a,
                self.evaluated_point_count,
                b,
                other.evaluated_point_count,
            )),
            (a, b) => a.or(b),
        };
        let success_at = self
            .success_at
            .iter()
            .zip(&other.success_at)
            .map(|(a, b)| {
                debug_assert_eq!(a.tau, b.tau);
                SuccessAt {
                    tau: a.tau,
                    fraction: weighted(
                        a.fraction,
                        self.evaluated_point_count,
                        b.fraction,
                        other.evaluated_point_count,
                    ),
                }
            })
            .collect();
        MetricSummary {
            mean_error,
            success_at,
            failure_rate: weighted(self.failure_rate, self.pair_count, other.failure_rate, other.pair_count),
            pair_count: pairs,
            evaluated_point_count: points,
        }
    }
}

/// Fraction of `errors` strictly below each threshold.
pub fn success_curve(errors: &[f64], taus: &[f64]) -> Vec<f64> {
    debug_assert!(taus.windows(2).all(|w| w[0] < w[1]), "taus must increase");
    if errors.is_empty() {
        return vec![0.0; taus.len()];
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    taus.iter()
        .map(|&tau| sorted.partition_point(|&e| e < tau) as f64 / sorted.len() as f64)
        .collect()
}

pub fn summarize(results: &[PairResult], thresholds: &[f64]) -> Result<MetricSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let errors: Vec<f64> = results
        .iter()
        .filter(|r| r.is_ok())
        .flat_map(|r| r.tiepoint_errors.iter().copied())
        .collect();
    let failed = results.iter().filter(|r| !r.is_ok()).count();
    let curve = success_curve(&errors, thresholds);
    let summary = MetricSummary {
        mean_error: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
        success_at: thresholds
            .iter()
            .zip(curve)
            .map(|(&tau, fraction)| SuccessAt { tau, fraction })
            .collect(),
        failure_rate: failed as f64 / results.len() as f64,
        pair_count: results.len(),
        evaluated_point_count: errors.len(),
    };
    if failed == results.len() {
        return Err(MetricsError::NoEvaluablePoints { summary });
    }
    Ok(summary)
}

/// Like [`summarize`] but returns the degenerate summary instead of an
/// error when every pair failed.
pub fn summarize_lenient(results: &[PairResult], thresholds: &[f64]) -> Option<MetricSummary> {
    match summarize(results, thresholds) {
        Ok(s) | Err(MetricsError::NoEvaluablePoints { summary: s }) => Some(s),
        Err(MetricsError::Empty) => None,
    }
}
