//! Sweep report files. Everything except `timing*.csv` is a pure function
//! of the results, so repeated sweeps produce byte-identical reports.
//!
//! Layout of an output directory:
//!
//! ```text
//! pairs.csv                 one row per (run, pair)
//! tiepoint_errors.csv       one row per evaluated point
//! failures.csv              failed pairs with their reason
//! retrieval_candidates.csv  only when the manifest carries retrieval roles
//! aggregates/run_NNN.json   per-run metric (and retrieval) summary
//! ranking.csv               best configuration per matcher
//! timing.csv                per-pair wall clock
//! timing_summary.csv        per-run wall clock totals
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{best_per_matcher, build_aggregate, RankingRow, RetrievalRole, RunAggregate, SweepError, SweepOptions, SweepOutcome};
use crate::metrics::success_curve;
use crate::pipeline::{PairResult, PairStatus};

pub const PAIRS_FILE: &str = "pairs.csv";
pub const ERRORS_FILE: &str = "tiepoint_errors.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const RETRIEVAL_FILE: &str = "retrieval_candidates.csv";
pub const AGGREGATES_DIR: &str = "aggregates";
pub const RANKING_FILE: &str = "ranking.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const TIMING_SUMMARY_FILE: &str = "timing_summary.csv";

/// Report files whose contents must not depend on scheduling.
pub const DETERMINISTIC_FILES: [&str; 5] = [PAIRS_FILE, ERRORS_FILE, FAILURES_FILE, RETRIEVAL_FILE, RANKING_FILE];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SweepError + '_ {
    move |source| SweepError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> SweepError + '_ {
    move |e| SweepError::Report(format!("{}: {e}", path.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Csv<'a> {
    path: &'a Path,
    w: csv::Writer<fs::File>,
}

impl<'a> Csv<'a> {
    fn create(path: &'a Path, header: &[&str]) -> Result<Self, SweepError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        w.write_record(header).map_err(csv_err(path))?;
        Ok(Self { path, w })
    }

    fn row<I, T>(&mut self, fields: I) -> Result<(), SweepError>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(csv_err(self.path))
    }

    fn finish(mut self) -> Result<(), SweepError> {
        self.w.flush().map_err(io_err(self.path))
    }
}

fn pair_success(r: &PairResult, tau: f64) -> Option<f64> {
    (r.is_ok() && !r.tiepoint_errors.is_empty()).then(|| success_curve(&r.tiepoint_errors, &[tau])[0])
}

pub fn write_reports(dir: &Path, outcome: &SweepOutcome) -> Result<(), SweepError> {
    fs::create_dir_all(dir.join(AGGREGATES_DIR)).map_err(io_err(dir))?;

    let p = dir.join(PAIRS_FILE);
    let mut pairs = Csv::create(
        &p,
        &["pair_id", "config_key", "matcher", "status", "correspondences", "inliers", "mean_err_px", "s_at_5", "s_at_10"],
    )?;
    let e = dir.join(ERRORS_FILE);
    let mut errors = Csv::create(&e, &["config_key", "matcher", "pair_id", "point", "error_px"])?;
    let f = dir.join(FAILURES_FILE);
    let mut failures = Csv::create(&f, &["config_key", "matcher", "pair_id", "reason"])?;
    let t = dir.join(TIMING_FILE);
    let mut timing = Csv::create(&t, &["config_key", "matcher", "pair_id", "wall_clock_s"])?;
    let ts = dir.join(TIMING_SUMMARY_FILE);
    let mut timing_summary = Csv::create(&ts, &["config_key", "matcher", "pairs", "total_s", "mean_s"])?;
    let has_retrieval = outcome.runs.iter().any(|r| r.roles.iter().any(Option::is_some));
    let rp = dir.join(RETRIEVAL_FILE);
    let mut retrieval = if has_retrieval {
        Some(Csv::create(&rp, &["config_key", "matcher", "query_id", "candidate_id", "positive", "score"])?)
    } else {
        None
    };

    for run in &outcome.runs {
        let key = run.aggregate.config_key.as_str();
        let label = run.aggregate.matcher.as_str();
        let mut total = 0.0;
        for (r, role) in run.results.iter().zip(&run.roles) {
            pairs.row([
                r.pair_id.clone(),
                key.to_string(),
                label.to_string(),
                r.status.as_str().to_string(),
                r.correspondence_count.to_string(),
                r.inlier_count.to_string(),
                opt(if r.is_ok() { r.mean_error() } else { None }),
                opt(pair_success(r, 5.0)),
                opt(pair_success(r, 10.0)),
            ])?;
            if r.is_ok() {
                for (i, err) in r.tiepoint_errors.iter().enumerate() {
                    errors.row([key, label, &r.pair_id, &i.to_string(), &err.to_string()])?;
                }
            } else {
                failures.row([key, label, &r.pair_id, r.failure.as_deref().unwrap_or("")])?;
            }
            if let (Some(w), Some(role)) = (retrieval.as_mut(), role) {
                let score = if r.is_ok() { r.inlier_count } else { 0 };
                w.row([key, label, &role.query_id, &r.pair_id, &role.positive.to_string(), &score.to_string()])?;
            }
            timing.row([key, label, &r.pair_id, &format!("{:.6}", r.wall_clock)])?;
            total += r.wall_clock;
        }
        let n = run.results.len();
        timing_summary.row([
            key,
            label,
            &n.to_string(),
            &format!("{total:.6}"),
            &format!("{:.6}", if n == 0 { 0.0 } else { total / n as f64 }),
        ])?;
    }
    pairs.finish()?;
    errors.finish()?;
    failures.finish()?;
    timing.finish()?;
    timing_summary.finish()?;
    if let Some(w) = retrieval {
        w.finish()?;
    }

    let aggregates: Vec<RunAggregate> = outcome.runs.iter().map(|r| r.aggregate.clone()).collect();
    write_aggregates(dir, &aggregates)?;
    write_ranking(dir, &outcome.ranking)
}

fn write_aggregates(dir: &Path, aggregates: &[RunAggregate]) -> Result<(), SweepError> {
    let adir = dir.join(AGGREGATES_DIR);
    fs::create_dir_all(&adir).map_err(io_err(&adir))?;
    for a in aggregates {
        let path = adir.join(format!("run_{:03}.json", a.run_index));
        let mut text = serde_json::to_string_pretty(a).map_err(|e| SweepError::Report(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn write_ranking(dir: &Path, ranking: &[RankingRow]) -> Result<(), SweepError> {
    let p = dir.join(RANKING_FILE);
    let mut w = Csv::create(
        &p,
        &["rank", "matcher", "config_key", "mean_err_px", "s_at_5", "s_at_10", "failure_rate", "pairs"],
    )?;
    for r in ranking {
        w.row([
            r.rank.to_string(),
            r.matcher.clone(),
            r.config_key.clone(),
            opt(r.mean_error),
            opt(r.success_at_5),
            opt(r.success_at_10),
            r.failure_rate.to_string(),
            r.pair_count.to_string(),
        ])?;
    }
    w.finish()
}

/// Reads every `aggregates/run_NNN.json` in run order.
pub fn read_aggregates(dir: &Path) -> Result<Vec<RunAggregate>, SweepError> {
    let adir = dir.join(AGGREGATES_DIR);
    let mut paths: Vec<_> = fs::read_dir(&adir)
        .map_err(io_err(&adir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let a: RunAggregate = serde_json::from_str(&text).map_err(|e| SweepError::Report(format!("{}: {e}", p.display())))?;
        out.push(a);
    }
    out.sort_by_key(|a| a.run_index);
    Ok(out)
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>, SweepError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.records().collect::<Result<_, _>>().map_err(csv_err(path))
}

fn field<'r>(rec: &'r csv::StringRecord, i: usize, path: &Path) -> Result<&'r str, SweepError> {
    rec.get(i)
        .ok_or_else(|| SweepError::Report(format!("{}: short record {:?}", path.display(), rec)))
}

fn number<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T, SweepError> {
    s.parse()
        .map_err(|_| SweepError::Report(format!("{}: bad number '{s}'", path.display())))
}

type RunKey = (String, String);

/// Recomputes per-run aggregates and the ranking from the per-pair report
/// files of a finished sweep, rewriting `aggregates/` and `ranking.csv`.
pub fn reaggregate(dir: &Path, options: &SweepOptions) -> Result<Vec<RankingRow>, SweepError> {
    let runs = read_aggregates(dir)?;

    let p = dir.join(PAIRS_FILE);
    let mut results: HashMap<RunKey, Vec<PairResult>> = HashMap::new();
    for rec in read_rows(&p)? {
        let run = (field(&rec, 1, &p)?.to_string(), field(&rec, 2, &p)?.to_string());
        let status = match field(&rec, 3, &p)? {
            "ok" => PairStatus::Ok,
            "failed" => PairStatus::Failed,
            s => return Err(SweepError::Report(format!("{}: unknown status '{s}'", p.display()))),
        };
        results.entry(run).or_default().push(PairResult {
            pair_id: field(&rec, 0, &p)?.to_string(),
            status,
            transform: None,
            inlier_count: number(field(&rec, 5, &p)?, &p)?,
            correspondence_count: number(field(&rec, 4, &p)?, &p)?,
            tiepoint_errors: Vec::new(),
            wall_clock: 0.0,
            failure: None,
        });
    }

    let e = dir.join(ERRORS_FILE);
    let mut errors: HashMap<(RunKey, String), Vec<f64>> = HashMap::new();
    for rec in read_rows(&e)? {
        let run = (field(&rec, 0, &e)?.to_string(), field(&rec, 1, &e)?.to_string());
        errors
            .entry((run, field(&rec, 2, &e)?.to_string()))
            .or_default()
            .push(number(field(&rec, 4, &e)?, &e)?);
    }

    let rp = dir.join(RETRIEVAL_FILE);
    let mut roles: HashMap<(RunKey, String), RetrievalRole> = HashMap::new();
    if rp.exists() {
        for rec in read_rows(&rp)? {
            let run = (field(&rec, 0, &rp)?.to_string(), field(&rec, 1, &rp)?.to_string());
            roles.insert(
                (run, field(&rec, 3, &rp)?.to_string()),
                RetrievalRole {
                    query_id: field(&rec, 2, &rp)?.to_string(),
                    positive: number(field(&rec, 4, &rp)?, &rp)?,
                },
            );
        }
    }

    let mut rebuilt = Vec::with_capacity(runs.len());
    for a in &runs {
        let run: RunKey = (a.config_key.clone(), a.matcher.clone());
        let mut rs = results.remove(&run).unwrap_or_default();
        let mut rr = Vec::with_capacity(rs.len());
        for r in &mut rs {
            let k = (run.clone(), r.pair_id.clone());
            if let Some(errs) = errors.remove(&k) {
                r.tiepoint_errors = errs;
            }
            rr.push(roles.remove(&k));
        }
        rebuilt.push(build_aggregate(a.run_index, &a.config, a.matcher.clone(), &rs, &rr, options));
    }
    write_aggregates(dir, &rebuilt)?;
    let ranking = best_per_matcher(&rebuilt);
    write_ranking(dir, &ranking)?;
    Ok(ranking)
}
