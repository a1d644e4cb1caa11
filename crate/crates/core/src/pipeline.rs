//! Per-pair protocol: normalize and resize, tiled matching, one global
//! RANSAC fit in full-resolution coordinates, displacement prediction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    apply_transform, ransac_fit, AffineTransform, Correspondence, GeometricTransform,
    GeometryError, Point2,
};
use crate::imaging::{normalize, resize_long_side, GrayImage, ImagingError, NormalizationKind};
use crate::matching::{Matcher, MatchingError};
use crate::seed;
use crate::sweep::{ProtocolConfig, ScenePairManifest};
use crate::tiling::{self, build_grid, TilePair};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("tie points {path}: {message}")]
    TiePoints { path: String, message: String },
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("pair {0} has no ground-truth affine")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiePoint {
    pub optical: Point2,
    pub sar: Point2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStatus {
    Ok,
    Failed,
}

impl PairStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PairStatus::Ok => "ok",
            PairStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub status: PairStatus,
    pub transform: Option<GeometricTransform>,
    pub inlier_count: usize,
    pub correspondence_count: usize,
    /// Tie-point (or corner) displacement errors in pixels; empty for
    /// failed pairs.
    pub tiepoint_errors: Vec<f64>,
    /// Seconds spent on tile extraction, matching and the RANSAC fit.
    pub wall_clock: f64,
    /// Why the pair failed, when it did.
    pub failure: Option<String>,
}

impl PairResult {
    pub fn failed(pair_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            pair_id: pair_id.into(),
            status: PairStatus::Failed,
            transform: None,
            inlier_count: 0,
            correspondence_count: 0,
            tiepoint_errors: Vec::new(),
            wall_clock: 0.0,
            failure: Some(reason.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == PairStatus::Ok
    }

    pub fn mean_error(&self) -> Option<f64> {
        (!self.tiepoint_errors.is_empty())
            .then(|| self.tiepoint_errors.iter().sum::<f64>() / self.tiepoint_errors.len() as f64)
    }
}

/// What the estimated transform is scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    TiePoints(Vec<TiePoint>),
    /// Ground-truth affine evaluated at the corners of a `width × height`
    /// source image.
    Corners {
        gt: AffineTransform,
        width: usize,
        height: usize,
    },
    None,
}

/// Stage boundaries in execution order.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageRecord {
    Normalize {
        kind: NormalizationKind,
        src_unchanged: bool,
        dst_unchanged: bool,
    },
    Resize {
        src_scale: f64,
        dst_scale: f64,
        src_size: (usize, usize),
        dst_size: (usize, usize),
    },
    Match {
        tiled: bool,
        tiles: usize,
        correspondences: usize,
        tile_failures: Vec<((usize, usize), String)>,
    },
    Fit {
        inliers: usize,
        failure: Option<String>,
    },
    Displacement {
        points: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineTrace {
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for per-tile PNG dumps (`optical/` and `sar/` subfolders).
    pub dump_tiles: Option<PathBuf>,
}

/// Euclidean error between the transformed optical point and its SAR tie
/// point. Points the transform sends to infinity score `+inf`.
pub fn predict_displacements(t: &GeometricTransform, tiepoints: &[TiePoint]) -> Vec<f64> {
    tiepoints
        .iter()
        .map(|tp| match apply_transform(t, tp.optical) {
            Ok(p) => p.distance(&tp.sar),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

/// First and last pixel centers of a `width × height` image, clockwise from
/// the top-left.
pub fn image_corners(width: usize, height: usize) -> [Point2; 4] {
    let (xm, ym) = ((width.max(1) - 1) as f64, (height.max(1) - 1) as f64);
    [
        Point2::new(0.0, 0.0),
        Point2::new(xm, 0.0),
        Point2::new(xm, ym),
        Point2::new(0.0, ym),
    ]
}

/// `||T(c) − A_gt(c)||` at the four image corners.
pub fn corner_errors(
    t: &GeometricTransform,
    gt: &AffineTransform,
    width: usize,
    height: usize,
) -> Vec<f64> {
    image_corners(width, height)
        .iter()
        .map(|&c| match apply_transform(t, c) {
            Ok(p) => p.distance(&gt.apply(c)),
            Err(_) => f64::INFINITY,
        })
        .collect()
}

/// Seed of the RANSAC stream for one pair: global seed, pair identifier and
/// the tile layout.
pub fn pair_seed(global: u64, pair_id: &str, tile_hash: u64) -> u64 {
    seed::mix(&[global, seed::fnv1a(pair_id.as_bytes()), tile_hash])
}

fn image_checksum(img: &GrayImage) -> u64 {
    let mut bytes = Vec::with_capacity(img.data().len() * 8);
    for v in img.data() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    seed::fnv1a(&bytes)
}

/// Builds the tile pairs for stage 2. Pairs whose long sides both fit in one
/// tile are matched whole.
pub fn plan_tiles(src: &GrayImage, dst: &GrayImage, tile_size: usize, overlap: usize) -> (bool, Vec<TilePair>, u64) {
    if src.long_side() <= tile_size && dst.long_side() <= tile_size {
        let pair = TilePair {
            index: (0, 0),
            src_tile: src.clone(),
            dst_tile: dst.clone(),
            src_origin: (0, 0),
            dst_origin: (0, 0),
        };
        let hash = seed::mix(&[0, src.width() as u64, src.height() as u64, dst.width() as u64, dst.height() as u64]);
        return (false, vec![pair], hash);
    }
    let sg = build_grid(src.width(), src.height(), tile_size, overlap);
    let dg = build_grid(dst.width(), dst.height(), tile_size, overlap);
    let mut words = vec![1, tile_size as u64, overlap as u64];
    for g in [&sg, &dg] {
        words.push(g.x_origins.len() as u64);
        words.extend(g.x_origins.iter().map(|&o| o as u64));
        words.push(g.y_origins.len() as u64);
        words.extend(g.y_origins.iter().map(|&o| o as u64));
    }
    (true, tiling::tile_pairs(src, dst, &sg, &dg), seed::mix(&words))
}

/// Runs all four stages on in-memory images.
pub fn run_images(
    pair_id: &str,
    optical: &GrayImage,
    sar: &GrayImage,
    supervision: &Supervision,
    config: &ProtocolConfig,
    matcher: &Matcher,
    options: &RunOptions,
) -> Result<(PairResult, PipelineTrace), PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let mut trace = PipelineTrace::default();

    // Stage 1: normalization, then resizing.
    let src_norm = normalize(optical, config.normalization);
    let dst_norm = normalize(sar, config.normalization);
    trace.stages.push(StageRecord::Normalize {
        kind: config.normalization,
        src_unchanged: image_checksum(&src_norm) == image_checksum(optical),
        dst_unchanged: image_checksum(&dst_norm) == image_checksum(sar),
    });
    let (src_img, src_scale) = resize_long_side(&src_norm, config.max_dimension);
    let (dst_img, dst_scale) = resize_long_side(&dst_norm, config.max_dimension);
    trace.stages.push(StageRecord::Resize {
        src_scale,
        dst_scale,
        src_size: (src_img.width(), src_img.height()),
        dst_size: (dst_img.width(), dst_img.height()),
    });

    // Stage 2: tiled correspondence extraction.
    let started = Instant::now();
    let (tiled, pairs, tile_hash) = plan_tiles(&src_img, &dst_img, config.tile_size, config.tile_overlap);
    if let Some(dir) = &options.dump_tiles {
        dump_tiles(dir, &pairs)?;
    }
    let outcomes: Vec<((usize, usize), Result<Vec<Correspondence>, MatchingError>)> = pairs
        .par_iter()
        .map(|p| {
            let local = matcher.match_tiles(&p.src_tile, &p.dst_tile);
            let full = local.map(|c| {
                tiling::project_to_full_frame(&c, p.src_origin, p.dst_origin, src_scale, dst_scale)
            });
            (p.index, full)
        })
        .collect();
    let mut tile_failures = Vec::new();
    let mut per_tile = Vec::with_capacity(outcomes.len());
    for (idx, outcome) in outcomes {
        match outcome {
            Ok(c) => per_tile.push((idx, c)),
            Err(e) => {
                log::warn!("pair {pair_id} tile {idx:?}: {e}");
                tile_failures.push((idx, e.to_string()));
            }
        }
    }
    let corrs = tiling::aggregate(per_tile);
    trace.stages.push(StageRecord::Match {
        tiled,
        tiles: pairs.len(),
        correspondences: corrs.len(),
        tile_failures,
    });

    // Stage 3: one global robust fit in full-resolution coordinates.
    let params = config.ransac_params(pair_seed(config.seed, pair_id, tile_hash));
    let fit = ransac_fit(&corrs, config.geometry, &params);
    let wall_clock = started.elapsed().as_secs_f64();
    let fit = match fit {
        Ok(f) => f,
        Err(e @ (GeometryError::BelowInlierGate { .. } | GeometryError::InsufficientCorrespondences { .. })) => {
            trace.stages.push(StageRecord::Fit {
                inliers: 0,
                failure: Some(e.to_string()),
            });
            let mut result = PairResult::failed(pair_id, e.to_string());
            result.correspondence_count = corrs.len();
            result.wall_clock = wall_clock;
            return Ok((result, trace));
        }
        Err(e) => return Err(e.into()),
    };
    trace.stages.push(StageRecord::Fit {
        inliers: fit.inlier_count,
        failure: None,
    });

    // Stage 4: displacement prediction.
    let errors = match supervision {
        Supervision::TiePoints(tps) => predict_displacements(&fit.transform, tps),
        Supervision::Corners { gt, width, height } => corner_errors(&fit.transform, gt, *width, *height),
        Supervision::None => Vec::new(),
    };
    trace.stages.push(StageRecord::Displacement {
        points: errors.len(),
    });
    Ok((
        PairResult {
            pair_id: pair_id.to_string(),
            status: PairStatus::Ok,
            transform: Some(fit.transform),
            inlier_count: fit.inlier_count,
            correspondence_count: corrs.len(),
            tiepoint_errors: errors,
            wall_clock,
            failure: None,
        },
        trace,
    ))
}

fn dump_tiles(dir: &Path, pairs: &[TilePair]) -> Result<(), PipelineError> {
    let (opt_dir, sar_dir) = (dir.join("optical"), dir.join("sar"));
    std::fs::create_dir_all(&opt_dir)?;
    std::fs::create_dir_all(&sar_dir)?;
    for p in pairs {
        let name = format!("r{}_c{}.png", p.index.0, p.index.1);
        p.src_tile.save_png(opt_dir.join(&name))?;
        p.dst_tile.save_png(sar_dir.join(&name))?;
    }
    Ok(())
}

/// Runs one manifest entry, scoring against its tie points when present.
/// Entries carrying only a ground-truth affine are scored on corners.
pub fn run_pair(
    entry: &ScenePairManifest,
    config: &ProtocolConfig,
    matcher: &Matcher,
    options: &RunOptions,
) -> Result<PairResult, PipelineError> {
    let optical = GrayImage::load(&entry.optical_path)?;
    let sar = GrayImage::load(&entry.sar_path)?;
    let supervision = match (&entry.tiepoints_path, &entry.gt_affine) {
        (Some(path), _) => Supervision::TiePoints(load_tiepoints(path)?),
        (None, Some(gt)) => Supervision::Corners {
            gt: *gt,
            width: optical.width(),
            height: optical.height(),
        },
        (None, None) => Supervision::None,
    };
    run_images(&entry.pair_id, &optical, &sar, &supervision, config, matcher, options).map(|(r, _)| r)
}

/// Corner-reprojection variant: requires the entry's ground-truth affine.
pub fn run_pair_corners(
    entry: &ScenePairManifest,
    config: &ProtocolConfig,
    matcher: &Matcher,
    options: &RunOptions,
) -> Result<PairResult, PipelineError> {
    let gt = entry
        .gt_affine
        .ok_or_else(|| PipelineError::MissingGroundTruth(entry.pair_id.clone()))?;
    let optical = GrayImage::load(&entry.optical_path)?;
    let sar = GrayImage::load(&entry.sar_path)?;
    let supervision = Supervision::Corners {
        gt,
        width: optical.width(),
        height: optical.height(),
    };
    run_images(&entry.pair_id, &optical, &sar, &supervision, config, matcher, options).map(|(r, _)| r)
}

/// Reads a 4-column `x_opt,y_opt,x_sar,y_sar` CSV; a non-numeric first row
/// is taken as a header.
pub fn load_tiepoints(path: impl AsRef<Path>) -> Result<Vec<TiePoint>, PipelineError> {
    let path = path.as_ref();
    let err = |message: String| PipelineError::TiePoints {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != 4 {
            return Err(err(format!("row {} has {} columns, expected 4", i + 1, record.len())));
        }
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) if v.iter().all(|x| x.is_finite()) => out.push(TiePoint {
                optical: Point2::new(v[0], v[1]),
                sar: Point2::new(v[2], v[3]),
            }),
            Ok(_) => return Err(err(format!("row {} has a non-finite value", i + 1))),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(err(format!("row {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

pub fn write_tiepoints(path: impl AsRef<Path>, tiepoints: &[TiePoint]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| PipelineError::TiePoints {
        path: path.as_ref().display().to_string(),
        message: e.to_string(),
    })?;
    let io = |e: csv::Error| PipelineError::Io(std::io::Error::other(e));
    w.write_record(["x_opt", "y_opt", "x_sar", "y_sar"]).map_err(io)?;
    for tp in tiepoints {
        w.write_record([
            tp.optical.x.to_string(),
            tp.optical.y.to_string(),
            tp.sar.x.to_string(),
            tp.sar.y.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
