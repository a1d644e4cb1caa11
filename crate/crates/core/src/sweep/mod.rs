//! Protocol sweeps: grid expansion, execution over a pair manifest and
//! deterministic report assembly.

mod config;
mod manifest;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    Overrides, ProtocolConfig, Settings, SweepGrid, DEFAULT_MAX_DIMENSION, DEFAULT_MIN_INLIERS,
    DEFAULT_RANSAC_THRESHOLD, DEFAULT_TILE_OVERLAP, DEFAULT_TILE_SIZE,
};
pub use manifest::{
    format_pair_manifest, format_retrieval_manifest, load_affine, load_pair_manifest,
    load_retrieval_manifest, parse_pair_manifest, parse_retrieval_manifest, retrieval_pairs,
    RetrievalManifestEntry, RetrievalRole, ScenePairManifest,
};

use crate::matching::{Matcher, MatcherSpec, MatchingError};
use crate::metrics::{self, MetricSummary, DEFAULT_SUCCESS_TAUS};
use crate::pipeline::{self, PairResult, RunOptions};
use crate::retrieval::{self, Candidate, RetrievalQuery, RetrievalSummary, DEFAULT_RECALL_KS};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("grid axis '{0}' is empty")]
    EmptyAxis(&'static str),
    #[error("grid axis '{0}' repeats a value")]
    DuplicateAxisValue(&'static str),
    #[error("run {index} has an invalid configuration: {message}")]
    InvalidConfig { index: usize, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<SweepError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest has no records")]
    EmptyManifest,
    #[error(transparent)]
    Matcher(#[from] MatchingError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("report: {0}")]
    Report(String),
}

impl SweepError {
    pub(crate) fn in_file(self, path: &Path) -> SweepError {
        match self {
            e @ (SweepError::Parse { .. } | SweepError::EmptyManifest) => SweepError::InFile {
                path: path.display().to_string(),
                source: Box::new(e),
            },
            other => other,
        }
    }
}

/// One expanded grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub index: usize,
    pub config: ProtocolConfig,
    /// Carries the cell's keypoint budget.
    pub matcher: MatcherSpec,
}

impl RunSpec {
    pub fn key(&self) -> String {
        format!("{} @ {}", self.matcher.label(), self.config.key())
    }
}

fn check_axis<T: PartialEq>(name: &'static str, values: &[T]) -> Result<(), SweepError> {
    if values.is_empty() {
        return Err(SweepError::EmptyAxis(name));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(SweepError::DuplicateAxisValue(name));
        }
    }
    Ok(())
}

/// Cross product in lexicographic order: matcher outermost, then
/// normalization, geometry, max dimension, tile size, overlap, threshold,
/// min inliers, keypoint budget and seed (innermost).
pub fn expand_grid(grid: &SweepGrid) -> Result<Vec<RunSpec>, SweepError> {
    check_axis("matcher", &grid.matchers)?;
    check_axis("normalization", &grid.normalization)?;
    check_axis("geometry", &grid.geometry)?;
    check_axis("max-dimension", &grid.max_dimension)?;
    check_axis("tile-size", &grid.tile_size)?;
    check_axis("tile-overlap", &grid.tile_overlap)?;
    check_axis("ransac-threshold", &grid.ransac_threshold)?;
    check_axis("min-inliers", &grid.min_inliers)?;
    check_axis("keypoint-budget", &grid.keypoint_budget)?;
    check_axis("seed", &grid.seed)?;

    let mut runs = Vec::with_capacity(grid.size());
    for m in &grid.matchers {
        for &normalization in &grid.normalization {
            for &geometry in &grid.geometry {
                for &max_dimension in &grid.max_dimension {
                    for &tile_size in &grid.tile_size {
                        for &tile_overlap in &grid.tile_overlap {
                            for &ransac_threshold in &grid.ransac_threshold {
                                for &min_inliers in &grid.min_inliers {
                                    for &keypoint_budget in &grid.keypoint_budget {
                                        for &seed in &grid.seed {
                                            let config = ProtocolConfig {
                                                normalization,
                                                max_dimension,
                                                tile_size,
                                                tile_overlap,
                                                geometry,
                                                ransac_threshold,
                                                min_inliers,
                                                keypoint_budget,
                                                seed,
                                            };
                                            let index = runs.len();
                                            config.validate().map_err(|message| {
                                                SweepError::InvalidConfig { index, message }
                                            })?;
                                            runs.push(RunSpec {
                                                index,
                                                config,
                                                matcher: m.clone().with_budget(keypoint_budget),
                                            });
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    pub dump_tiles: bool,
    pub success_taus: Vec<f64>,
    pub recall_ks: Vec<usize>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            jobs: None,
            dump_tiles: false,
            success_taus: DEFAULT_SUCCESS_TAUS.to_vec(),
            recall_ks: DEFAULT_RECALL_KS.to_vec(),
        }
    }
}

/// Aggregate record of one run, as written to `aggregates/run_NNN.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub run_index: usize,
    pub config_key: String,
    pub matcher: String,
    pub config: ProtocolConfig,
    pub metrics: Option<MetricSummary>,
    pub retrieval: Option<RetrievalSummary>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub results: Vec<PairResult>,
    /// Retrieval role per result, aligned with `results`.
    pub roles: Vec<Option<RetrievalRole>>,
    pub aggregate: RunAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub rank: usize,
    pub matcher: String,
    pub config_key: String,
    pub mean_error: Option<f64>,
    pub success_at_5: Option<f64>,
    pub success_at_10: Option<f64>,
    pub failure_rate: f64,
    pub pair_count: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<RunOutcome>,
    pub ranking: Vec<RankingRow>,
}

/// Builds retrieval queries from pair results: score is the inlier count of
/// successful fits, 0 otherwise. Queries are ordered by id.
pub fn retrieval_queries(results: &[PairResult], roles: &[Option<RetrievalRole>]) -> Vec<RetrievalQuery> {
    let mut by_query: BTreeMap<&str, Vec<Candidate>> = BTreeMap::new();
    for (r, role) in results.iter().zip(roles) {
        if let Some(role) = role {
            by_query.entry(&role.query_id).or_default().push(Candidate {
                id: r.pair_id.clone(),
                positive: role.positive,
                score: if r.is_ok() { r.inlier_count as f64 } else { 0.0 },
            });
        }
    }
    by_query
        .into_iter()
        .map(|(q, candidates)| RetrievalQuery {
            query_id: q.to_string(),
            candidates,
        })
        .collect()
}

pub fn aggregate_run(
    spec: &RunSpec,
    results: &[PairResult],
    roles: &[Option<RetrievalRole>],
    options: &SweepOptions,
) -> RunAggregate {
    build_aggregate(spec.index, &spec.config, spec.matcher.label(), results, roles, options)
}

pub(crate) fn build_aggregate(
    run_index: usize,
    config: &ProtocolConfig,
    matcher: String,
    results: &[PairResult],
    roles: &[Option<RetrievalRole>],
    options: &SweepOptions,
) -> RunAggregate {
    let queries = retrieval_queries(results, roles);
    RunAggregate {
        run_index,
        config_key: config.key(),
        matcher,
        config: config.clone(),
        metrics: metrics::summarize_lenient(results, &options.success_taus),
        retrieval: (!queries.is_empty())
            .then(|| retrieval::summarize_retrieval(&queries, &options.recall_ks)),
    }
}

fn ranking_order(a: &RunAggregate, b: &RunAggregate) -> std::cmp::Ordering {
    let err = |r: &RunAggregate| r.metrics.as_ref().and_then(|m| m.mean_error);
    let s10 = |r: &RunAggregate| r.metrics.as_ref().and_then(|m| m.success(10.0)).unwrap_or(0.0);
    let fail = |r: &RunAggregate| r.metrics.as_ref().map_or(1.0, |m| m.failure_rate);
    let by_error = match (err(a), err(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    };
    by_error
        .then_with(|| s10(b).total_cmp(&s10(a)))
        .then_with(|| fail(a).total_cmp(&fail(b)))
        .then_with(|| a.config_key.cmp(&b.config_key))
}

/// Best cell per matcher (lowest mean error; ties by higher Success@10,
/// lower failure rate, then config key), ranked by mean error.
pub fn best_per_matcher(aggregates: &[RunAggregate]) -> Vec<RankingRow> {
    let mut best: BTreeMap<&str, &RunAggregate> = BTreeMap::new();
    for a in aggregates {
        best.entry(&a.matcher)
            .and_modify(|cur| {
                if ranking_order(a, cur).is_lt() {
                    *cur = a;
                }
            })
            .or_insert(a);
    }
    let mut winners: Vec<&RunAggregate> = best.into_values().collect();
    winners.sort_by(|a, b| ranking_order(a, b).then_with(|| a.matcher.cmp(&b.matcher)));
    winners
        .into_iter()
        .enumerate()
        .map(|(i, a)| RankingRow {
            rank: i + 1,
            matcher: a.matcher.clone(),
            config_key: a.config_key.clone(),
            mean_error: a.metrics.as_ref().and_then(|m| m.mean_error),
            success_at_5: a.metrics.as_ref().and_then(|m| m.success(5.0)),
            success_at_10: a.metrics.as_ref().and_then(|m| m.success(10.0)),
            failure_rate: a.metrics.as_ref().map_or(1.0, |m| m.failure_rate),
            pair_count: a.metrics.as_ref().map_or(0, |m| m.pair_count),
        })
        .collect()
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, SweepError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| SweepError::ThreadPool(e.to_string()))
}

/// Executes every (run, pair) combination and aggregates per run. Per-pair
/// errors become failed rows. Results do not depend on the worker count.
pub fn execute(
    runs: &[RunSpec],
    manifest: &[ScenePairManifest],
    options: &SweepOptions,
    dump_root: Option<&Path>,
) -> Result<SweepOutcome, SweepError> {
    if manifest.is_empty() {
        return Err(SweepError::EmptyManifest);
    }
    let specs: BTreeSet<&MatcherSpec> = runs.iter().map(|r| &r.matcher).collect();
    let matchers: BTreeMap<&MatcherSpec, Matcher> = specs
        .into_iter()
        .map(|s| Matcher::from_spec(s).map(|m| (s, m)))
        .collect::<Result<_, _>>()?;
    let pool = thread_pool(options.jobs)?;

    let work: Vec<(usize, usize)> = (0..runs.len())
        .flat_map(|r| (0..manifest.len()).map(move |p| (r, p)))
        .collect();
    let results: Vec<PairResult> = pool.install(|| {
        work.par_iter()
            .map(|&(r, p)| {
                let run = &runs[r];
                let entry = &manifest[p];
                let opts = RunOptions {
                    dump_tiles: dump_root.map(|d| {
                        d.join(format!("run_{:03}", run.index))
                            .join(sanitize(&entry.pair_id))
                    }),
                };
                pipeline::run_pair(entry, &run.config, &matchers[&run.matcher], &opts)
                    .unwrap_or_else(|e| {
                        log::warn!("run {} pair {}: {e}", run.index, entry.pair_id);
                        PairResult::failed(&entry.pair_id, e.to_string())
                    })
            })
            .collect()
    });

    let roles: Vec<Option<RetrievalRole>> = manifest.iter().map(|m| m.retrieval.clone()).collect();
    let mut outcomes = Vec::with_capacity(runs.len());
    let mut iter = results.into_iter();
    for spec in runs {
        let pair_results: Vec<PairResult> = iter.by_ref().take(manifest.len()).collect();
        let aggregate = aggregate_run(spec, &pair_results, &roles, options);
        outcomes.push(RunOutcome {
            spec: spec.clone(),
            results: pair_results,
            roles: roles.clone(),
            aggregate,
        });
    }
    let aggregates: Vec<RunAggregate> = outcomes.iter().map(|o| o.aggregate.clone()).collect();
    Ok(SweepOutcome {
        ranking: best_per_matcher(&aggregates),
        runs: outcomes,
    })
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Expands the grid, runs it over the manifest and writes the reports to
/// `output_dir`.
pub fn run_sweep(
    grid: &SweepGrid,
    manifest: &[ScenePairManifest],
    output_dir: &Path,
    options: &SweepOptions,
) -> Result<SweepOutcome, SweepError> {
    let runs = expand_grid(grid)?;
    let dump: Option<PathBuf> = options.dump_tiles.then(|| output_dir.join("tiles"));
    let outcome = execute(&runs, manifest, options, dump.as_deref())?;
    report::write_reports(output_dir, &outcome)?;
    Ok(outcome)
}
