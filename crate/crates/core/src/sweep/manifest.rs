//! Pair and retrieval manifests.
//!
//! Both are line-delimited records of whitespace-separated `key=value`
//! tokens; `#` starts a comment. Relative paths resolve against the
//! manifest's directory.
//!
//! Scene pairs:
//!
//! ```text
//! pair=scene01 optical=opt.png sar=sar.png tiepoints=tp.csv gt=scene01.affine
//! pair=q03_c07 optical=c07.png sar=q03.png query=q03 label=negative
//! ```
//!
//! `gt=` names a file holding the 6 affine coefficients; `gt_affine=` takes
//! them inline, comma-separated. `query=`/`label=` mark retrieval pairs.
//!
//! Retrieval:
//!
//! ```text
//! query=q03 image=q03.png positive=c07 candidate=c00:c00.png candidate=c07:c07.png
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SweepError;
use crate::geometry::{AffineTransform, GeometricTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRole {
    pub query_id: String,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePairManifest {
    pub pair_id: String,
    pub optical_path: PathBuf,
    pub sar_path: PathBuf,
    pub tiepoints_path: Option<PathBuf>,
    pub gt_affine: Option<AffineTransform>,
    pub retrieval: Option<RetrievalRole>,
}

impl ScenePairManifest {
    pub fn new(pair_id: impl Into<String>, optical: impl Into<PathBuf>, sar: impl Into<PathBuf>) -> Self {
        Self {
            pair_id: pair_id.into(),
            optical_path: optical.into(),
            sar_path: sar.into(),
            tiepoints_path: None,
            gt_affine: None,
            retrieval: None,
        }
    }

    pub fn is_evaluable(&self) -> bool {
        self.tiepoints_path.is_some() || self.gt_affine.is_some() || self.retrieval.is_some()
    }
}

fn tokens(line: &str, line_no: usize) -> Result<Vec<(String, String)>, SweepError> {
    line.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_ascii_lowercase(), v.to_string()))
                .ok_or_else(|| SweepError::Parse {
                    line: line_no,
                    message: format!("expected key=value, found '{tok}'"),
                })
        })
        .collect()
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn read(path: &Path) -> Result<String, SweepError> {
    std::fs::read_to_string(path).map_err(|e| SweepError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Reads a 6-coefficient affine file.
pub fn load_affine(path: &Path) -> Result<AffineTransform, SweepError> {
    let text = read(path)?;
    match text.parse::<GeometricTransform>() {
        Ok(GeometricTransform::Affine(a)) => Ok(a),
        Ok(_) => Err(SweepError::Parse {
            line: 1,
            message: "expected 6 affine coefficients, found 9".into(),
        }
        .in_file(path)),
        Err(e) => Err(SweepError::Parse {
            line: 1,
            message: e.to_string(),
        }
        .in_file(path)),
    }
}

pub fn parse_pair_manifest(text: &str, base: &Path) -> Result<Vec<ScenePairManifest>, SweepError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in records(text) {
        let err = |message: String| SweepError::Parse { line: line_no, message };
        let (mut pair, mut optical, mut sar) = (None, None, None);
        let (mut tiepoints, mut gt, mut query, mut label) = (None, None, None, None);
        for (k, v) in tokens(line, line_no)? {
            match k.as_str() {
                "pair" => pair = Some(v),
                "optical" => optical = Some(base.join(v)),
                "sar" => sar = Some(base.join(v)),
                "tiepoints" => tiepoints = Some(base.join(v)),
                "gt" => {
                    let p = base.join(&v);
                    gt = Some(load_affine(&p)?);
                }
                "gt_affine" => {
                    let text = v.replace(',', " ");
                    match text.parse::<GeometricTransform>() {
                        Ok(GeometricTransform::Affine(a)) => gt = Some(a),
                        _ => return Err(err(format!("gt_affine needs 6 numbers, found '{v}'"))),
                    }
                }
                "query" => query = Some(v),
                "label" => {
                    label = Some(match v.to_ascii_lowercase().as_str() {
                        "positive" | "match" | "1" => true,
                        "negative" | "nomatch" | "0" => false,
                        _ => return Err(err(format!("label must be positive or negative, found '{v}'"))),
                    })
                }
                _ => return Err(err(format!("unknown field '{k}'"))),
            }
        }
        let pair_id = pair.ok_or_else(|| err("missing pair=".into()))?;
        if !seen.insert(pair_id.clone()) {
            return Err(err(format!("duplicate pair id '{pair_id}'")));
        }
        let retrieval = match (query, label) {
            (Some(query_id), Some(positive)) => Some(RetrievalRole { query_id, positive }),
            (None, None) => None,
            _ => return Err(err("query= and label= must appear together".into())),
        };
        out.push(ScenePairManifest {
            optical_path: optical.ok_or_else(|| err("missing optical=".into()))?,
            sar_path: sar.ok_or_else(|| err("missing sar=".into()))?,
            pair_id,
            tiepoints_path: tiepoints,
            gt_affine: gt,
            retrieval,
        });
    }
    if out.is_empty() {
        return Err(SweepError::EmptyManifest);
    }
    Ok(out)
}

pub fn load_pair_manifest(path: &Path) -> Result<Vec<ScenePairManifest>, SweepError> {
    let text = read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_pair_manifest(&text, base).map_err(|e| e.in_file(path))
}

fn relative(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

/// Serializes entries; paths under `base` are written relative to it.
/// Inline `gt_affine` is used for ground truth.
pub fn format_pair_manifest(entries: &[ScenePairManifest], base: &Path) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "pair={} optical={} sar={}",
            e.pair_id,
            relative(&e.optical_path, base),
            relative(&e.sar_path, base)
        ));
        if let Some(tp) = &e.tiepoints_path {
            out.push_str(&format!(" tiepoints={}", relative(tp, base)));
        }
        if let Some(gt) = &e.gt_affine {
            let coeffs: Vec<String> = gt.m.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(" gt_affine={}", coeffs.join(",")));
        }
        if let Some(r) = &e.retrieval {
            out.push_str(&format!(
                " query={} label={}",
                r.query_id,
                if r.positive { "positive" } else { "negative" }
            ));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalManifestEntry {
    pub query_id: String,
    pub query_path: PathBuf,
    pub positive_id: String,
    /// `(candidate id, image path)` in file order.
    pub candidates: Vec<(String, PathBuf)>,
}

pub fn parse_retrieval_manifest(text: &str, base: &Path) -> Result<Vec<RetrievalManifestEntry>, SweepError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in records(text) {
        let err = |message: String| SweepError::Parse { line: line_no, message };
        let (mut query, mut image, mut positive) = (None, None, None);
        let mut candidates = Vec::new();
        for (k, v) in tokens(line, line_no)? {
            match k.as_str() {
                "query" => query = Some(v),
                "image" => image = Some(base.join(v)),
                "positive" => positive = Some(v),
                "candidate" => {
                    let (id, path) = v
                        .split_once(':')
                        .ok_or_else(|| err(format!("candidate must be id:path, found '{v}'")))?;
                    candidates.push((id.to_string(), base.join(path)));
                }
                _ => return Err(err(format!("unknown field '{k}'"))),
            }
        }
        let query_id = query.ok_or_else(|| err("missing query=".into()))?;
        if !seen.insert(query_id.clone()) {
            return Err(err(format!("duplicate query id '{query_id}'")));
        }
        let positive_id = positive.ok_or_else(|| err("missing positive=".into()))?;
        if candidates.is_empty() {
            return Err(err("query has no candidates".into()));
        }
        let mut ids = BTreeSet::new();
        if !candidates.iter().all(|(id, _)| ids.insert(id.clone())) {
            return Err(err("duplicate candidate id".into()));
        }
        if !ids.contains(&positive_id) {
            return Err(err(format!("positive '{positive_id}' is not among the candidates")));
        }
        out.push(RetrievalManifestEntry {
            query_id,
            query_path: image.ok_or_else(|| err("missing image=".into()))?,
            positive_id,
            candidates,
        });
    }
    if out.is_empty() {
        return Err(SweepError::EmptyManifest);
    }
    Ok(out)
}

pub fn load_retrieval_manifest(path: &Path) -> Result<Vec<RetrievalManifestEntry>, SweepError> {
    let text = read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_retrieval_manifest(&text, base).map_err(|e| e.in_file(path))
}

pub fn format_retrieval_manifest(entries: &[RetrievalManifestEntry], base: &Path) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "query={} image={} positive={}",
            e.query_id,
            relative(&e.query_path, base),
            e.positive_id
        ));
        for (id, p) in &e.candidates {
            out.push_str(&format!(" candidate={}:{}", id, relative(p, base)));
        }
        out.push('\n');
    }
    out
}

/// Expands retrieval records into scene pairs (candidate as the optical
/// side, query as the SAR side), one per query–candidate combination.
pub fn retrieval_pairs(entries: &[RetrievalManifestEntry]) -> Vec<ScenePairManifest> {
    entries
        .iter()
        .flat_map(|e| {
            e.candidates.iter().map(move |(cid, path)| ScenePairManifest {
                pair_id: format!("{}/{}", e.query_id, cid),
                optical_path: path.clone(),
                sar_path: e.query_path.clone(),
                tiepoints_path: None,
                gt_affine: None,
                retrieval: Some(RetrievalRole {
                    query_id: e.query_id.clone(),
                    positive: *cid == e.positive_id,
                }),
            })
        })
        .collect()
}
