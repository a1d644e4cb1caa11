//! 2D geometric transforms, exact solvers and RANSAC.
//!
//! Coordinates are continuous pixel positions with the origin at the center
//! of the top-left pixel. Transforms map source (optical) coordinates to
//! destination (SAR) coordinates.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Homography denominators below this magnitude are treated as points at
/// infinity.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("homography maps point to infinity (denominator {0:e})")]
    DegeneratePoint(f64),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("need at least {needed} correspondences, got {available}")]
    InsufficientCorrespondences { needed: usize, available: usize },
    #[error("best consensus of {best} inliers is below the gate of {required}")]
    BelowInlierGate { best: usize, required: usize },
    #[error("source and destination lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid RANSAC parameters: {0}")]
    InvalidParams(String),
    #[error("cannot parse transform: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A matcher-proposed point pair in source and destination frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub src: Point2,
    pub dst: Point2,
    /// In `[0, 1]`.
    pub confidence: f64,
}

impl Correspondence {
    pub fn new(src: Point2, dst: Point2, confidence: f64) -> Self {
        Self {
            src,
            dst,
            confidence,
        }
    }
}

/// Row-major `[[a, b, tx], [c, d, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [f64; 6],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };

    pub const fn new(m: [f64; 6]) -> Self {
        Self { m }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    /// Rotation by `angle` radians and isotropic `scale` about the origin,
    /// followed by a translation.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new([scale * c, -scale * s, tx, scale * s, scale * c, ty])
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let [a, b, tx, c, d, ty] = self.m;
        Point2::new(a * p.x + b * p.y + tx, c * p.x + d * p.y + ty)
    }

    pub fn determinant(&self) -> f64 {
        self.m[0] * self.m[4] - self.m[1] * self.m[3]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let [a, b, tx, c, d, ty] = self.m;
        let [e, f, ux, g, h, uy] = other.m;
        AffineTransform::new([
            a * e + b * g,
            a * f + b * h,
            a * ux + b * uy + tx,
            c * e + d * g,
            c * f + d * h,
            c * ux + d * uy + ty,
        ])
    }

    pub fn inverse(&self) -> Result<AffineTransform, GeometryError> {
        let det = self.determinant();
        if det.abs() < 1e-15 || !det.is_finite() {
            return Err(GeometryError::DegenerateConfiguration(
                "affine linear part is singular",
            ));
        }
        let [a, b, tx, c, d, ty] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineTransform::new([
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ]))
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Row-major 3×3 projective map, kept normalized (see [`Homography::normalized`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [f64; 9],
}

impl Homography {
    pub const IDENTITY: Self = Self {
        h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    };

    /// Scales `h` so that `h[8] == 1`, or to unit Frobenius norm with a
    /// non-negative trace when `|h[8]| <= 1e-9`.
    pub fn normalized(h: [f64; 9]) -> Self {
        let h22 = h[8];
        if h22.abs() > 1e-9 {
            return Self {
                h: h.map(|v| v / h22),
            };
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let trace = h[0] + h[4] + h[8];
        let s = if trace < 0.0 { -norm } else { norm };
        if s == 0.0 {
            return Self { h };
        }
        Self { h: h.map(|v| v / s) }
    }

    pub fn from_affine(a: &AffineTransform) -> Self {
        let [a0, a1, a2, a3, a4, a5] = a.m;
        Self {
            h: [a0, a1, a2, a3, a4, a5, 0.0, 0.0, 1.0],
        }
    }

    pub fn apply(&self, p: Point2) -> Result<Point2, GeometryError> {
        let h = &self.h;
        let w = h[6] * p.x + h[7] * p.y + h[8];
        if w.abs() < DEGENERATE_DENOMINATOR || !w.is_finite() {
            return Err(GeometryError::DegeneratePoint(w));
        }
        Ok(Point2::new(
            (h[0] * p.x + h[1] * p.y + h[2]) / w,
            (h[3] * p.x + h[4] * p.y + h[5]) / w,
        ))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.h)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[r * 3 + c] = m[(r, c)];
            }
        }
        Self::normalized(h)
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        self.matrix()
            .try_inverse()
            .map(|m| Self::from_matrix(&m))
            .ok_or(GeometryError::DegenerateConfiguration(
                "homography is singular",
            ))
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryKind {
    Affine,
    Homography,
}

impl GeometryKind {
    /// Points in a minimal sample.
    pub fn minimal_sample(self) -> usize {
        match self {
            GeometryKind::Affine => 3,
            GeometryKind::Homography => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GeometryKind::Affine => "affine",
            GeometryKind::Homography => "homography",
        }
    }
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeometryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "affine" => Ok(GeometryKind::Affine),
            "homography" => Ok(GeometryKind::Homography),
            other => Err(format!(
                "unknown geometry '{other}' (expected affine or homography)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GeometricTransform {
    Affine(AffineTransform),
    Homography(Homography),
}

impl GeometricTransform {
    pub fn kind(&self) -> GeometryKind {
        match self {
            GeometricTransform::Affine(_) => GeometryKind::Affine,
            GeometricTransform::Homography(_) => GeometryKind::Homography,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        match self {
            GeometricTransform::Affine(a) => &a.m,
            GeometricTransform::Homography(h) => &h.h,
        }
    }

    pub fn as_homography(&self) -> Homography {
        match self {
            GeometricTransform::Affine(a) => Homography::from_affine(a),
            GeometricTransform::Homography(h) => *h,
        }
    }

    /// `self ∘ other`. Affine only when both operands are affine.
    pub fn compose(&self, other: &GeometricTransform) -> GeometricTransform {
        match (self, other) {
            (GeometricTransform::Affine(a), GeometricTransform::Affine(b)) => {
                GeometricTransform::Affine(a.compose(b))
            }
            _ => GeometricTransform::Homography(Homography::from_matrix(
                &(self.as_homography().matrix() * other.as_homography().matrix()),
            )),
        }
    }

    pub fn inverse(&self) -> Result<GeometricTransform, GeometryError> {
        match self {
            GeometricTransform::Affine(a) => a.inverse().map(GeometricTransform::Affine),
            GeometricTransform::Homography(h) => h.inverse().map(GeometricTransform::Homography),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coefficients().iter().all(|v| v.is_finite())
    }
}

impl From<AffineTransform> for GeometricTransform {
    fn from(a: AffineTransform) -> Self {
        GeometricTransform::Affine(a)
    }
}

impl From<Homography> for GeometricTransform {
    fn from(h: Homography) -> Self {
        GeometricTransform::Homography(h)
    }
}

/// One line of whitespace-separated coefficients, row-major: 6 for an
/// affine, 9 for a homography.
impl fmt::Display for GeometricTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let coeffs = self.coefficients();
        for (i, v) in coeffs.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for GeometricTransform {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| GeometryError::Parse(format!("'{t}': {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Parse("non-finite coefficient".into()));
        }
        match values.len() {
            6 => Ok(GeometricTransform::Affine(AffineTransform::new(
                values.try_into().expect("length checked"),
            ))),
            9 => Ok(GeometricTransform::Homography(Homography::normalized(
                values.try_into().expect("length checked"),
            ))),
            n => Err(GeometryError::Parse(format!(
                "expected 6 or 9 coefficients, found {n}"
            ))),
        }
    }
}

pub fn apply_transform(t: &GeometricTransform, p: Point2) -> Result<Point2, GeometryError> {
    match t {
        GeometricTransform::Affine(a) => Ok(a.apply(p)),
        GeometricTransform::Homography(h) => h.apply(p),
    }
}

/// Euclidean reprojection error per correspondence; points sent to infinity
/// by a homography get `+inf`.
pub fn residuals(t: &GeometricTransform, corrs: &[Correspondence]) -> Vec<f64> {
    corrs.iter().map(|c| residual(t, c)).collect()
}

fn residual(t: &GeometricTransform, c: &Correspondence) -> f64 {
    match apply_transform(t, c.src) {
        Ok(p) => p.distance(&c.dst),
        Err(_) => f64::INFINITY,
    }
}

/// Isotropic conditioning: shifts the centroid to the origin and scales the
/// mean distance from it to `target_mean_dist`. Returns `(cx, cy, scale)`.
fn conditioning(points: &[Point2], target_mean_dist: f64) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / n;
    let scale = if mean_dist > 0.0 {
        target_mean_dist / mean_dist
    } else {
        1.0
    };
    (cx, cy, scale)
}

/// Least-squares affine fit minimizing `Σ ||A·src_i − dst_i||²`.
pub fn fit_affine_lsq(src: &[Point2], dst: &[Point2]) -> Result<AffineTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(GeometryError::InsufficientCorrespondences {
            needed: 3,
            available: src.len(),
        });
    }
    let (cx, cy, s) = conditioning(src, 1.0);
    let n = src.len();
    let (qx, qy) = (
        dst.iter().map(|q| q.x).sum::<f64>() / n as f64,
        dst.iter().map(|q| q.y).sum::<f64>() / n as f64,
    );
    // SVD of the design matrix itself; the normal equations would square its
    // condition number.
    let design = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => (src[i].x - cx) * s,
        1 => (src[i].y - cy) * s,
        _ => 1.0,
    });
    let rhs = DMatrix::from_fn(n, 2, |i, j| if j == 0 { dst[i].x - qx } else { dst[i].y - qy });
    let svd = design.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(min_sv > 1e-5 * max_sv) {
        return Err(GeometryError::DegenerateConfiguration(
            "source points are collinear",
        ));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|_| GeometryError::DegenerateConfiguration("affine least squares failed"))?;
    // Undo the conditioning: u = s (x - cx).
    let (a, b) = (sol[(0, 0)] * s, sol[(1, 0)] * s);
    let (c, d) = (sol[(0, 1)] * s, sol[(1, 1)] * s);
    let tx = sol[(2, 0)] + qx - a * cx - b * cy;
    let ty = sol[(2, 1)] + qy - c * cx - d * cy;
    let fitted = AffineTransform::new([a, b, tx, c, d, ty]);
    if !fitted.is_finite() {
        return Err(GeometryError::DegenerateConfiguration(
            "non-finite affine solution",
        ));
    }
    Ok(fitted)
}

/// Normalized direct linear transform. Both point sets are conditioned to
/// zero centroid and mean distance √2 before the SVD.
pub fn fit_homography_dlt(src: &[Point2], dst: &[Point2]) -> Result<Homography, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len();
    if n < 4 {
        return Err(GeometryError::InsufficientCorrespondences {
            needed: 4,
            available: n,
        });
    }
    let (scx, scy, ss) = conditioning(src, std::f64::consts::SQRT_2);
    let (dcx, dcy, ds) = conditioning(dst, std::f64::consts::SQRT_2);

    // Pad to at least 9 rows so the thin SVD exposes the full right basis.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let (x, y) = ((p.x - scx) * ss, (p.y - scy) * ss);
        let (u, v) = ((q.x - dcx) * ds, (q.y - dcy) * ds);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(GeometryError::DegenerateConfiguration("SVD did not converge"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(second > 1e-10 * largest) {
        return Err(GeometryError::DegenerateConfiguration(
            "DLT design matrix is rank-deficient",
        ));
    }
    let hn = Matrix3::from_fn(|r, c| v_t[(smallest, r * 3 + c)]);
    let t_src = Matrix3::new(ss, 0.0, -ss * scx, 0.0, ss, -ss * scy, 0.0, 0.0, 1.0);
    let t_dst_inv = Matrix3::new(1.0 / ds, 0.0, dcx, 0.0, 1.0 / ds, dcy, 0.0, 0.0, 1.0);
    let h = t_dst_inv * hn * t_src;
    if h.determinant().abs() < 1e-14 * h.norm().powi(3) {
        return Err(GeometryError::DegenerateConfiguration(
            "estimated homography is singular",
        ));
    }
    let out = Homography::from_matrix(&h);
    if !out.h.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::DegenerateConfiguration(
            "non-finite homography",
        ));
    }
    Ok(out)
}

/// Least-squares fit of the given model kind.
pub fn fit_model(
    kind: GeometryKind,
    src: &[Point2],
    dst: &[Point2],
) -> Result<GeometricTransform, GeometryError> {
    match kind {
        GeometryKind::Affine => fit_affine_lsq(src, dst).map(GeometricTransform::Affine),
        GeometryKind::Homography => fit_homography_dlt(src, dst).map(GeometricTransform::Homography),
    }
}

fn collinear(a: Point2, b: Point2, c: Point2) -> bool {
    let (ux, uy) = (b.x - a.x, b.y - a.y);
    let (vx, vy) = (c.x - a.x, c.y - a.y);
    let cross = (ux * vy - uy * vx).abs();
    let scale = ux.hypot(uy) * vx.hypot(vy);
    cross <= 1e-6 * scale || scale == 0.0
}

/// Whether a minimal sample (3 or 4 source points) is degenerate.
fn sample_is_degenerate(points: &[Point2]) -> bool {
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if collinear(points[i], points[j], points[k]) {
                    return true;
                }
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Pixels.
    pub reproj_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            reproj_threshold: 10.0,
            max_iterations: 2000,
            confidence: 0.995,
            min_inliers: 6,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self, kind: GeometryKind) -> Result<(), GeometryError> {
        if !(self.reproj_threshold > 0.0 && self.reproj_threshold.is_finite()) {
            return Err(GeometryError::InvalidParams(format!(
                "threshold must be positive, got {}",
                self.reproj_threshold
            )));
        }
        if self.max_iterations == 0 {
            return Err(GeometryError::InvalidParams(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(GeometryError::InvalidParams(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        if self.min_inliers < kind.minimal_sample() {
            return Err(GeometryError::InvalidParams(format!(
                "min_inliers {} is below the {} minimal sample of {}",
                self.min_inliers,
                kind,
                kind.minimal_sample()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub transform: GeometricTransform,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    /// Mean residual over `inlier_mask`, pixels.
    pub mean_inlier_residual: f64,
    /// Mean inlier residual of the best minimal-sample hypothesis before the
    /// least-squares refit.
    pub hypothesis_mean_residual: f64,
    /// Counted sampling iterations (degenerate resamples excluded).
    pub iterations: usize,
}

struct Consensus {
    transform: GeometricTransform,
    mask: Vec<bool>,
    count: usize,
    mean: f64,
}

fn consensus(t: GeometricTransform, corrs: &[Correspondence], threshold: f64) -> Consensus {
    let mut mask = Vec::with_capacity(corrs.len());
    let mut count = 0;
    let mut sum = 0.0;
    for c in corrs {
        let r = residual(&t, c);
        let inside = r <= threshold;
        if inside {
            count += 1;
            sum += r;
        }
        mask.push(inside);
    }
    let mean = if count > 0 { sum / count as f64 } else { f64::INFINITY };
    Consensus {
        transform: t,
        mask,
        count,
        mean,
    }
}

fn adaptive_bound(confidence: f64, inlier_ratio: f64, sample: usize) -> f64 {
    let good = inlier_ratio.powi(sample as i32);
    if good >= 1.0 {
        return 0.0;
    }
    if good <= 0.0 {
        return f64::INFINITY;
    }
    let denom = (1.0 - good).ln();
    if denom >= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / denom).ceil()
}

const MAX_DEGENERATE_RESAMPLES: usize = 100;

/// Seeded RANSAC with a single least-squares refit on the consensus set.
///
/// Deterministic for a fixed correspondence order and `params.seed`.
/// Equal-size consensus sets are ordered by mean inlier residual, then by
/// iteration. The refit replaces the best hypothesis only when it keeps the
/// gate and does not raise the mean inlier residual.
pub fn ransac_fit(
    corrs: &[Correspondence],
    kind: GeometryKind,
    params: &RansacParams,
) -> Result<FitResult, GeometryError> {
    params.validate(kind)?;
    let sample_size = kind.minimal_sample();
    if corrs.len() < sample_size {
        return Err(GeometryError::InsufficientCorrespondences {
            needed: sample_size,
            available: corrs.len(),
        });
    }
    let mut rng = seed::rng_from(params.seed);
    let n = corrs.len();
    let threshold = params.reproj_threshold;

    let mut best: Option<Consensus> = None;
    let mut bound = params.max_iterations as f64;
    let mut iterations = 0usize;
    let mut src = Vec::with_capacity(sample_size);
    let mut dst = Vec::with_capacity(sample_size);

    'outer: while (iterations as f64) < bound.min(params.max_iterations as f64) {
        let mut rejections = 0;
        loop {
            let picks = index::sample(&mut rng, n, sample_size);
            src.clear();
            dst.clear();
            for i in picks.iter() {
                src.push(corrs[i].src);
                dst.push(corrs[i].dst);
            }
            if !sample_is_degenerate(&src) && !sample_is_degenerate(&dst) {
                break;
            }
            rejections += 1;
            if rejections >= MAX_DEGENERATE_RESAMPLES {
                break 'outer;
            }
        }
        iterations += 1;
        let Ok(hypothesis) = fit_model(kind, &src, &dst) else {
            continue;
        };
        let candidate = consensus(hypothesis, corrs, threshold);
        let better = match &best {
            None => candidate.count > 0,
            Some(b) => {
                candidate.count > b.count || (candidate.count == b.count && candidate.mean < b.mean)
            }
        };
        if better {
            let ratio = candidate.count as f64 / n as f64;
            bound = adaptive_bound(params.confidence, ratio, sample_size);
            best = Some(candidate);
        }
    }

    let best_count = best.as_ref().map_or(0, |b| b.count);
    let Some(best) = best.filter(|b| b.count >= params.min_inliers) else {
        return Err(GeometryError::BelowInlierGate {
            best: best_count,
            required: params.min_inliers,
        });
    };

    let (in_src, in_dst): (Vec<Point2>, Vec<Point2>) = corrs
        .iter()
        .zip(&best.mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| (c.src, c.dst))
        .unzip();
    let hypothesis_mean = best.mean;
    let chosen = match fit_model(kind, &in_src, &in_dst) {
        Ok(refit) => {
            let refined = consensus(refit, corrs, threshold);
            if refined.count >= params.min_inliers && refined.mean <= hypothesis_mean {
                refined
            } else {
                best
            }
        }
        Err(_) => best,
    };

    Ok(FitResult {
        transform: chosen.transform,
        inlier_count: chosen.count,
        inlier_mask: chosen.mask,
        mean_inlier_residual: chosen.mean,
        hypothesis_mean_residual: hypothesis_mean,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng;

    fn corr(sx: f64, sy: f64, dx: f64, dy: f64) -> Correspondence {
        Correspondence::new(Point2::new(sx, sy), Point2::new(dx, dy), 1.0)
    }

    // Test-only generator of random affines and point sets; independent of
    // the solvers it feeds.
    fn random_affine<R: Rng>(rng: &mut R) -> AffineTransform {
        AffineTransform::new([
            rng.random_range(0.5..1.5),
            rng.random_range(-0.3..0.3),
            rng.random_range(-100.0..100.0),
            rng.random_range(-0.3..0.3),
            rng.random_range(0.5..1.5),
            rng.random_range(-100.0..100.0),
        ])
    }

    fn random_points<R: Rng>(rng: &mut R, n: usize) -> Vec<Point2> {
        (0..n)
            .map(|_| Point2::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)))
            .collect()
    }

    #[test]
    fn apply_examples() {
        let id = GeometricTransform::Affine(AffineTransform::IDENTITY);
        assert_eq!(
            apply_transform(&id, Point2::new(37.5, -4.0)).unwrap(),
            Point2::new(37.5, -4.0)
        );
        let a = GeometricTransform::Affine(AffineTransform::new([2.0, 0.0, 10.0, 0.0, 2.0, 20.0]));
        assert_eq!(
            apply_transform(&a, Point2::new(1.0, 1.0)).unwrap(),
            Point2::new(12.0, 22.0)
        );
        // [2 0 0; 0 2 0; 0 0 1]·(3, 4, 1) = (6, 8, 1) → (6, 8).
        let h = GeometricTransform::Homography(Homography::normalized([
            2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0,
        ]));
        assert_eq!(
            apply_transform(&h, Point2::new(3.0, 4.0)).unwrap(),
            Point2::new(6.0, 8.0)
        );
    }

    #[test]
    fn homography_point_at_infinity() {
        // Denominator x - 1 vanishes at x = 1.
        let h = GeometricTransform::Homography(Homography {
            h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0],
        });
        assert!(matches!(
            apply_transform(&h, Point2::new(1.0, 5.0)),
            Err(GeometryError::DegeneratePoint(_))
        ));
        let r = residuals(&h, &[corr(1.0, 5.0, 0.0, 0.0), corr(2.0, 0.0, 2.0, 0.0)]);
        assert!(r[0].is_infinite());
        assert!(r[1].abs() < 1e-12);
    }

    #[test]
    fn homography_normalization_degenerate_h22() {
        let h = Homography::normalized([0.0, -2.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let norm: f64 = h.h.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(h.h[0] + h.h[4] + h.h[8] >= 0.0);
        let h = Homography::normalized([-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(h.h[0] > 0.0 && h.h[4] > 0.0);
    }

    #[test]
    fn affine_three_exact_pairs() {
        let src = [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)];
        let dst = [Point2::new(10.0, 20.0), Point2::new(12.0, 20.0), Point2::new(10.0, 22.0)];
        let a = fit_affine_lsq(&src, &dst).unwrap();
        for (got, want) in a.m.iter().zip([2.0, 0.0, 10.0, 0.0, 2.0, 20.0]) {
            assert!((got - want).abs() < 1e-12, "{:?}", a.m);
        }
    }

    #[test]
    fn affine_identity_when_src_equals_dst() {
        let mut rng = rng_from(3);
        let pts = random_points(&mut rng, 17);
        let a = fit_affine_lsq(&pts, &pts).unwrap();
        for (got, want) in a.m.iter().zip(AffineTransform::IDENTITY.m) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_recovers_seeded_transform() {
        let mut rng = rng_from(11);
        let truth = random_affine(&mut rng);
        let src = random_points(&mut rng, 50);
        let dst: Vec<_> = src.iter().map(|&p| truth.apply(p)).collect();
        let a = fit_affine_lsq(&src, &dst).unwrap();
        for (got, want) in a.m.iter().zip(truth.m) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_rejects_collinear() {
        let src = [Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0), Point2::new(5.0, 5.0)];
        assert!(matches!(
            fit_affine_lsq(&src, &src),
            Err(GeometryError::DegenerateConfiguration(_))
        ));
        assert!(matches!(
            fit_affine_lsq(&src[..2], &src[..2]),
            Err(GeometryError::InsufficientCorrespondences { .. })
        ));
        assert!(matches!(
            fit_affine_lsq(&src[..3], &src[..2]),
            Err(GeometryError::LengthMismatch(3, 2))
        ));
    }

    #[test]
    fn dlt_identity_and_affine_embedding() {
        let sq = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ];
        let h = fit_homography_dlt(&sq, &sq).unwrap();
        for (got, want) in h.h.iter().zip(Homography::IDENTITY.h) {
            assert!((got - want).abs() < 1e-9, "{:?}", h.h);
        }
        let shift = AffineTransform::translation(5.0, 7.0);
        let moved: Vec<_> = sq.iter().map(|&p| shift.apply(p)).collect();
        let h = fit_homography_dlt(&sq, &moved).unwrap();
        for (got, want) in h.h.iter().zip([1.0, 0.0, 5.0, 0.0, 1.0, 7.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-9, "{:?}", h.h);
        }
    }

    #[test]
    fn dlt_recovers_projective_map() {
        let mut rng = rng_from(5);
        let truth = Homography::normalized([
            1.05, 0.04, 12.0, -0.03, 0.97, -8.0, 2e-5, -1.5e-5, 1.0,
        ]);
        let src = random_points(&mut rng, 30);
        let dst: Vec<_> = src.iter().map(|&p| truth.apply(p).unwrap()).collect();
        let h = fit_homography_dlt(&src, &dst).unwrap();
        let corners = [(0.0, 0.0), (1000.0, 0.0), (1000.0, 1000.0), (0.0, 1000.0)];
        for (x, y) in corners {
            let p = Point2::new(x, y);
            let err = h.apply(p).unwrap().distance(&truth.apply(p).unwrap());
            assert!(err < 1e-6, "corner error {err}");
        }
    }

    #[test]
    fn dlt_rejects_three_collinear_of_four() {
        let src = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(0.0, 1.0),
        ];
        assert!(matches!(
            fit_homography_dlt(&src, &src),
            Err(GeometryError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn residual_examples() {
        let id = GeometricTransform::Affine(AffineTransform::IDENTITY);
        assert_eq!(residuals(&id, &[corr(1.0, 2.0, 1.0, 2.0)]), vec![0.0]);
        assert_eq!(residuals(&id, &[corr(0.0, 0.0, 3.0, 4.0)]), vec![5.0]);
    }

    #[test]
    fn ransac_exact_affine_total_consensus() {
        let mut rng = rng_from(21);
        let truth = random_affine(&mut rng);
        let src = random_points(&mut rng, 10);
        let corrs: Vec<_> = src
            .iter()
            .map(|&p| Correspondence::new(p, truth.apply(p), 1.0))
            .collect();
        let params = RansacParams {
            reproj_threshold: 3.0,
            ..RansacParams::default()
        };
        let fit = ransac_fit(&corrs, GeometryKind::Affine, &params).unwrap();
        assert_eq!(fit.inlier_count, 10);
        let dst: Vec<_> = corrs.iter().map(|c| c.dst).collect();
        let lsq = fit_affine_lsq(&src, &dst).unwrap();
        for (got, want) in fit.transform.coefficients().iter().zip(lsq.m) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ransac_gate_and_insufficient() {
        let corrs: Vec<_> = (0..5)
            .map(|i| {
                let x = i as f64 * 13.0;
                let y = (i * i) as f64 * 3.0;
                corr(x, y, x + 1.0, y)
            })
            .collect();
        let err = ransac_fit(&corrs, GeometryKind::Affine, &RansacParams::default()).unwrap_err();
        assert_eq!(err, GeometryError::BelowInlierGate { best: 5, required: 6 });
        let err = ransac_fit(&corrs[..2], GeometryKind::Affine, &RansacParams::default()).unwrap_err();
        assert!(matches!(err, GeometryError::InsufficientCorrespondences { needed: 3, available: 2 }));
        let err = ransac_fit(&corrs[..3], GeometryKind::Homography, &RansacParams::default()).unwrap_err();
        assert!(matches!(err, GeometryError::InsufficientCorrespondences { needed: 4, .. }));
    }

    #[test]
    fn ransac_param_validation() {
        let corrs = vec![corr(0.0, 0.0, 0.0, 0.0); 10];
        let bad = [
            RansacParams { reproj_threshold: 0.0, ..Default::default() },
            RansacParams { max_iterations: 0, ..Default::default() },
            RansacParams { confidence: 1.0, ..Default::default() },
            RansacParams { min_inliers: 3, ..Default::default() },
        ];
        for p in &bad {
            assert!(matches!(
                ransac_fit(&corrs, GeometryKind::Homography, p),
                Err(GeometryError::InvalidParams(_))
            ));
        }
    }

    #[test]
    fn ransac_all_coincident_points_fail_cleanly() {
        let corrs = vec![corr(4.0, 4.0, 5.0, 5.0); 20];
        let err = ransac_fit(&corrs, GeometryKind::Affine, &RansacParams::default()).unwrap_err();
        assert!(matches!(err, GeometryError::BelowInlierGate { best: 0, .. }));
    }

    #[test]
    fn transform_text_round_trip() {
        let t: GeometricTransform = "1 0 5.5 0 1 -7".parse().unwrap();
        assert_eq!(t, GeometricTransform::Affine(AffineTransform::new([1.0, 0.0, 5.5, 0.0, 1.0, -7.0])));
        assert_eq!(t.to_string(), "1 0 5.5 0 1 -7");
        let h: GeometricTransform = "2 0 0 0 2 0 0 0 2".parse().unwrap();
        assert_eq!(h.coefficients(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!("1 2 3".parse::<GeometricTransform>().is_err());
        assert!("1 0 x 0 1 0".parse::<GeometricTransform>().is_err());
    }

    #[test]
    fn geometry_kind_parse() {
        assert_eq!("Affine".parse::<GeometryKind>().unwrap(), GeometryKind::Affine);
        let err = "pinhole".parse::<GeometryKind>().unwrap_err();
        assert!(err.contains("unknown geometry"));
    }

    #[test]
    fn compose_and_inverse() {
        let a = AffineTransform::similarity(1.2, 0.3, 5.0, -2.0);
        let inv = a.inverse().unwrap();
        let p = Point2::new(13.0, 7.0);
        assert!(inv.apply(a.apply(p)).distance(&p) < 1e-12);
        let g = GeometricTransform::Affine(a);
        let h = GeometricTransform::Homography(Homography::from_affine(&inv));
        let back = g.compose(&h);
        assert_eq!(back.kind(), GeometryKind::Homography);
        assert!(apply_transform(&back, p).unwrap().distance(&p) < 1e-12);
    }
}
