//! Synthetic optical/SAR-like scene pairs with known ground truth.
//!
//! Optical texture is multi-octave value noise with rectangular blobs,
//! quantized to integers. The SAR-like image is the warped optical image,
//! optionally inverted (`255 - x`), then multiplied by mean-1 gamma speckle
//! and rounded.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_transform, AffineTransform, GeometricTransform, Homography, Point2};
use crate::imaging::{GrayImage, ImagingError};
use crate::pipeline::{write_tiepoints, PipelineError, TiePoint};
use crate::seed;
use crate::sweep::{RetrievalManifestEntry, ScenePairManifest};

pub const MIN_DIMENSION: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synthetic image must be at least {MIN_DIMENSION}x{MIN_DIMENSION}, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("invalid synth parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Maps optical pixel coordinates to SAR-like pixel coordinates.
    pub planted_transform: GeometricTransform,
    pub speckle_strength: f64,
    pub invert_contrast: bool,
    pub texture_seed: u64,
    /// Tie points per axis before filtering to both frames.
    pub tiepoint_grid: usize,
}

impl SynthSpec {
    pub fn identity(width: usize, height: usize, texture_seed: u64) -> Self {
        Self {
            width,
            height,
            planted_transform: GeometricTransform::Affine(AffineTransform::IDENTITY),
            speckle_strength: 0.0,
            invert_contrast: false,
            texture_seed,
            tiepoint_grid: 8,
        }
    }

    /// 512×512 scene with a seeded near-identity affine.
    pub fn seeded(seed: u64) -> Self {
        Self {
            planted_transform: GeometricTransform::Affine(near_identity_affine(seed, 512, 512)),
            ..Self::identity(512, 512, seed)
        }
    }

    pub fn with_speckle(mut self, s: f64) -> Self {
        self.speckle_strength = s;
        self
    }

    pub fn with_inversion(mut self, on: bool) -> Self {
        self.invert_contrast = on;
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width < MIN_DIMENSION || self.height < MIN_DIMENSION {
            return Err(SynthError::TooSmall(self.width, self.height));
        }
        if !(self.speckle_strength.is_finite() && self.speckle_strength >= 0.0) {
            return Err(SynthError::Invalid(format!("speckle strength {}", self.speckle_strength)));
        }
        if self.tiepoint_grid == 0 {
            return Err(SynthError::Invalid("tie-point grid must be positive".into()));
        }
        if !self.planted_transform.is_finite() || self.planted_transform.inverse().is_err() {
            return Err(SynthError::Invalid("planted transform is not invertible".into()));
        }
        Ok(())
    }
}

/// Rotation within ±2°, scale in [0.98, 1.02] and translation within ±20 px,
/// rotating about the image center.
pub fn near_identity_affine(seed: u64, width: usize, height: usize) -> AffineTransform {
    let mut rng = seed::rng_from(seed::mix(&[seed, 0xaff1]));
    let angle = rng.random_range(-2.0f64..=2.0).to_radians();
    let scale = rng.random_range(0.98..=1.02);
    let tx = rng.random_range(-20.0..=20.0);
    let ty = rng.random_range(-20.0..=20.0);
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    AffineTransform::translation(cx + tx, cy + ty)
        .compose(&AffineTransform::similarity(scale, angle, 0.0, 0.0))
        .compose(&AffineTransform::translation(-cx, -cy))
}

/// [`near_identity_affine`] followed by a mild perspective term, up to
/// about 4% scale change across a 1024 px frame.
pub fn near_identity_homography(seed: u64, width: usize, height: usize) -> Homography {
    let a = near_identity_affine(seed, width, height);
    let mut rng = seed::rng_from(seed::mix(&[seed, 0x4040]));
    let span = 0.04 / width.max(height) as f64;
    let g = rng.random_range(-span..=span);
    let h = rng.random_range(-span..=span);
    let m = &a.m;
    Homography::normalized([m[0], m[1], m[2], m[3], m[4], m[5], g, h, 1.0])
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Seeded texture in [0, 255] with integer values.
pub fn texture(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = seed::rng_from(seed::mix(&[seed, 0x7e47]));
    let octaves = [(64usize, 0.45), (32, 0.27), (16, 0.17), (8, 0.11)];
    let mut acc = vec![0.0f64; width * height];
    for &(cell, amp) in &octaves {
        let gw = width / cell + 2;
        let gh = height / cell + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let gy = y / cell;
            let fy = smoothstep((y % cell) as f64 / cell as f64);
            for x in 0..width {
                let gx = x / cell;
                let fx = smoothstep((x % cell) as f64 / cell as f64);
                let l = |i: usize, j: usize| lattice[j * gw + i];
                let top = l(gx, gy) * (1.0 - fx) + l(gx + 1, gy) * fx;
                let bot = l(gx, gy + 1) * (1.0 - fx) + l(gx + 1, gy + 1) * fx;
                acc[y * width + x] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
    }
    for v in &mut acc {
        *v = 40.0 + 140.0 * *v;
    }
    let blobs = (width * height).div_ceil(2048);
    for _ in 0..blobs {
        let w = rng.random_range(6..=40usize).min(width);
        let h = rng.random_range(6..=40usize).min(height);
        let x0 = rng.random_range(0..=width - w);
        let y0 = rng.random_range(0..=height - h);
        let delta = rng.random_range(30.0..80.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        for y in y0..y0 + h {
            for v in &mut acc[y * width + x0..y * width + x0 + w] {
                *v += delta;
            }
        }
    }
    let data = acc.into_iter().map(|v| v.clamp(0.0, 255.0).round()).collect();
    GrayImage::new(width, height, data).expect("dimensions match")
}

fn inside(p: Point2, width: usize, height: usize) -> bool {
    p.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64
}

/// `out(p) = img(t⁻¹(p))` with bilinear sampling; black outside the source.
pub fn warp(img: &GrayImage, t: &GeometricTransform, width: usize, height: usize) -> GrayImage {
    let inv = t.inverse().expect("validated transform is invertible");
    GrayImage::from_fn(width, height, |x, y| {
        match apply_transform(&inv, Point2::new(x as f64, y as f64)) {
            Ok(p) if inside(p, img.width(), img.height()) => img.sample_bilinear(p.x, p.y),
            _ => 0.0,
        }
    })
}

fn degrade(img: &GrayImage, spec: &SynthSpec) -> GrayImage {
    let mut out = if spec.invert_contrast {
        img.map(|v| 255.0 - v)
    } else {
        img.clone()
    };
    if spec.speckle_strength > 0.0 {
        let shape = 1.0 / (spec.speckle_strength * spec.speckle_strength);
        let gamma = Gamma::new(shape, 1.0 / shape).expect("positive shape");
        let mut rng = seed::rng_from(seed::mix(&[spec.texture_seed, 0x5bec]));
        let data: Vec<f64> = out.data().iter().map(|&v| v * gamma.sample(&mut rng)).collect();
        out = GrayImage::new(img.width(), img.height(), data).expect("dimensions match");
    }
    out.map(|v| v.clamp(0.0, 255.0).round())
}

/// Grid tie points mapped by `t`, kept when inside both frames.
pub fn grid_tiepoints(t: &GeometricTransform, width: usize, height: usize, n: usize) -> Vec<TiePoint> {
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let p = Point2::new(
                (i as f64 + 0.5) * (width - 1) as f64 / n as f64,
                (j as f64 + 0.5) * (height - 1) as f64 / n as f64,
            );
            if let Ok(q) = apply_transform(t, p) {
                if inside(q, width, height) {
                    out.push(TiePoint { optical: p, sar: q });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub optical: GrayImage,
    pub sar_like: GrayImage,
    pub tiepoints: Vec<TiePoint>,
    pub gt: GeometricTransform,
}

pub fn generate_pair(spec: &SynthSpec) -> Result<SynthPair, SynthError> {
    spec.validate()?;
    let optical = texture(spec.width, spec.height, spec.texture_seed);
    let warped = warp(&optical, &spec.planted_transform, spec.width, spec.height);
    Ok(SynthPair {
        sar_like: degrade(&warped, spec),
        tiepoints: grid_tiepoints(&spec.planted_transform, spec.width, spec.height, spec.tiepoint_grid),
        gt: spec.planted_transform.clone(),
        optical,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<id>_optical.png`, `<id>_sar.png`, `<id>_tiepoints.csv` and
/// `<id>.transform` into `dir`; affine ground truth is also put on the
/// manifest entry.
pub fn write_pair(dir: &Path, pair_id: &str, pair: &SynthPair) -> Result<ScenePairManifest, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let optical = dir.join(format!("{pair_id}_optical.png"));
    let sar = dir.join(format!("{pair_id}_sar.png"));
    let tiepoints = dir.join(format!("{pair_id}_tiepoints.csv"));
    let transform = dir.join(format!("{pair_id}.transform"));
    pair.optical.save_png(&optical)?;
    pair.sar_like.save_png(&sar)?;
    write_tiepoints(&tiepoints, &pair.tiepoints)?;
    fs::write(&transform, format!("{}\n", pair.gt)).map_err(io_err(&transform))?;
    let mut entry = ScenePairManifest::new(pair_id, optical, sar);
    entry.tiepoints_path = Some(tiepoints);
    if let GeometricTransform::Affine(a) = pair.gt {
        entry.gt_affine = Some(a);
    }
    Ok(entry)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub n_queries: usize,
    pub pool_size: usize,
    pub seed: u64,
    /// Candidate side length; queries are the central 3/4 crop.
    pub size: usize,
    pub speckle_strength: f64,
    pub invert_contrast: bool,
}

impl PoolSpec {
    pub fn new(n_queries: usize, pool_size: usize, seed: u64) -> Self {
        Self {
            n_queries,
            pool_size,
            seed,
            size: 192,
            speckle_strength: 0.0,
            invert_contrast: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoolQuery {
    pub query_id: String,
    pub image: GrayImage,
    pub positive_id: String,
    pub candidates: Vec<(String, GrayImage)>,
}

/// Each query is a warped, degraded crop of one candidate in its pool; the
/// other candidates are independent textures. The positive's position in
/// the pool is seeded.
pub fn generate_retrieval_pool(spec: &PoolSpec) -> Result<Vec<PoolQuery>, SynthError> {
    if spec.pool_size < 2 {
        return Err(SynthError::Invalid(format!("pool size must be at least 2, got {}", spec.pool_size)));
    }
    if spec.size < MIN_DIMENSION {
        return Err(SynthError::TooSmall(spec.size, spec.size));
    }
    let crop = spec.size * 3 / 4;
    let off = (spec.size - crop) / 2;
    let mut rng = seed::rng_from(seed::mix(&[spec.seed, 0x9001]));
    let mut out = Vec::with_capacity(spec.n_queries);
    for q in 0..spec.n_queries {
        let positive = rng.random_range(0..spec.pool_size);
        let candidates: Vec<(String, GrayImage)> = (0..spec.pool_size)
            .map(|c| {
                let s = seed::mix(&[spec.seed, q as u64, c as u64]);
                (format!("c{c:02}"), texture(spec.size, spec.size, s))
            })
            .collect();
        let pair_spec = SynthSpec {
            width: spec.size,
            height: spec.size,
            planted_transform: GeometricTransform::Affine(near_identity_affine(
                seed::mix(&[spec.seed, q as u64]),
                spec.size,
                spec.size,
            )),
            speckle_strength: spec.speckle_strength,
            invert_contrast: spec.invert_contrast,
            texture_seed: seed::mix(&[spec.seed, q as u64, 0x51]),
            tiepoint_grid: 1,
        };
        let warped = warp(&candidates[positive].1, &pair_spec.planted_transform, spec.size, spec.size);
        let image = degrade(&warped, &pair_spec).crop(off, off, crop, crop);
        out.push(PoolQuery {
            query_id: format!("q{q:02}"),
            image,
            positive_id: candidates[positive].0.clone(),
            candidates,
        });
    }
    Ok(out)
}

/// Writes query and candidate PNGs and returns the manifest entries.
pub fn write_retrieval_pool(dir: &Path, pool: &[PoolQuery]) -> Result<Vec<RetrievalManifestEntry>, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(pool.len());
    for q in pool {
        let query_path = dir.join(format!("{}.png", q.query_id));
        q.image.save_png(&query_path)?;
        let mut candidates = Vec::with_capacity(q.candidates.len());
        for (id, img) in &q.candidates {
            let p: PathBuf = dir.join(format!("{}_{}.png", q.query_id, id));
            img.save_png(&p)?;
            candidates.push((id.clone(), p));
        }
        entries.push(RetrievalManifestEntry {
            query_id: q.query_id.clone(),
            query_path,
            positive_id: q.positive_id.clone(),
            candidates,
        });
    }
    Ok(entries)
}
