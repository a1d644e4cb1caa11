//! Pair-level retrieval: candidates ranked by RANSAC inlier count, scored
//! with pooled AUROC/AUPRC and per-query Recall@K.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{ransac_fit, GeometryKind, RansacParams};
use crate::imaging::GrayImage;
use crate::matching::Matcher;
use crate::seed;

/// RANSAC threshold used for retrieval scoring, pixels.
pub const RETRIEVAL_THRESHOLD: f64 = 3.0;
pub const DEFAULT_RECALL_KS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub positive: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub query_id: String,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    /// `None` without both positive and negative candidates.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub recall_at: Vec<RecallAt>,
    pub query_count: usize,
    pub candidate_count: usize,
}

/// Affine RANSAC parameters for retrieval scoring.
pub fn retrieval_params(seed: u64) -> RansacParams {
    RansacParams {
        reproj_threshold: RETRIEVAL_THRESHOLD,
        seed,
        ..RansacParams::default()
    }
}

/// Inlier count of an affine fit between each candidate (source side) and
/// the query (destination side); 0 when the fit fails the gate or the
/// matcher returns nothing usable.
pub fn score_candidates(
    query: &GrayImage,
    candidates: &[GrayImage],
    matcher: &Matcher,
    params: &RansacParams,
) -> Vec<usize> {
    candidates
        .par_iter()
        .enumerate()
        .map(|(i, cand)| {
            let corrs = match matcher.match_tiles(cand, query) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("candidate {i}: {e}");
                    return 0;
                }
            };
            let p = RansacParams {
                seed: seed::mix(&[params.seed, i as u64]),
                ..*params
            };
            ransac_fit(&corrs, GeometryKind::Affine, &p).map_or(0, |f| f.inlier_count)
        })
        .collect()
}

/// Mann–Whitney estimate: `(#{pos > neg} + ½·#{pos = neg}) / (|pos|·|neg|)`.
pub fn auroc(pos: &[f64], neg: &[f64]) -> f64 {
    assert!(!pos.is_empty() && !neg.is_empty(), "auroc needs both classes");
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Step-interpolated area under the precision–recall curve from a
/// descending-score sweep; tied scores enter at one threshold.
pub fn auprc(pos: &[f64], neg: &[f64]) -> f64 {
    assert!(!pos.is_empty(), "auprc needs positives");
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    area
}

/// Candidate order: descending score, ties by ascending candidate id.
pub fn rank_candidates(query: &RetrievalQuery) -> Vec<&Candidate> {
    let mut ranked: Vec<&Candidate> = query.candidates.iter().collect();
    ranked.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o,
    });
    ranked
}

/// Fraction of queries whose positive ranks within the top `k`. Queries
/// without a positive count as misses.
pub fn recall_at_k(queries: &[RetrievalQuery], ks: &[usize]) -> Vec<RecallAt> {
    let ranks: Vec<Option<usize>> = queries
        .iter()
        .map(|q| rank_candidates(q).iter().position(|c| c.positive).map(|p| p + 1))
        .collect();
    ks.iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
            RecallAt {
                k,
                recall: if queries.is_empty() {
                    0.0
                } else {
                    hits as f64 / queries.len() as f64
                },
            }
        })
        .collect()
}

/// Pooled AUROC/AUPRC over every query–candidate pair plus Recall@K.
pub fn summarize_retrieval(queries: &[RetrievalQuery], ks: &[usize]) -> RetrievalSummary {
    let (pos, neg): (Vec<&Candidate>, Vec<&Candidate>) = queries
        .iter()
        .flat_map(|q| q.candidates.iter())
        .partition(|c| c.positive);
    let pos: Vec<f64> = pos.iter().map(|c| c.score).collect();
    let neg: Vec<f64> = neg.iter().map(|c| c.score).collect();
    let both = !pos.is_empty() && !neg.is_empty();
    RetrievalSummary {
        auroc: both.then(|| auroc(&pos, &neg)),
        auprc: (!pos.is_empty()).then(|| auprc(&pos, &neg)),
        recall_at: recall_at_k(queries, ks),
        query_count: queries.len(),
        candidate_count: pos.len() + neg.len(),
    }
}
