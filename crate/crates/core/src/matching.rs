//! Correspondence sources.
//!
//! The builtin matcher is a classical Harris + normalized-patch pipeline that
//! makes every downstream stage testable without model weights. Real
//! matchers plug in through [`ExternalMatcher`], which drives a subprocess
//! over a line protocol:
//!
//! ```text
//! request:  MATCH <id> <src_png_path> <dst_png_path>
//! response: BEGIN <id> <count>
//!           x0 y0 x1 y1 conf        (count lines, tile-local pixels)
//!           END <id>
//! error:    ERR <id> <message>
//! ```

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::geometry::{Correspondence, Point2};
use crate::imaging::{GrayImage, ImagingError};

pub const DEFAULT_KEYPOINT_BUDGET: usize = 4096;
pub const DEFAULT_EXTERNAL_TIMEOUT: Duration = Duration::from_secs(120);

pub const HARRIS_K: f64 = 0.04;
pub const HARRIS_SIGMA: f64 = 1.0;
/// Corners weaker than this fraction of the strongest response are dropped.
pub const HARRIS_QUALITY: f64 = 0.01;
pub const PATCH_SIZE: usize = 16;
pub const RATIO_TEST: f64 = 0.9;

#[derive(Debug, Error)]
pub enum MatchingError {
    #[error("external matcher failure: {0}")]
    ExternalMatcherFailure(String),
    #[error("matcher spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatcherSpec {
    pub kind: MatcherKind,
    pub keypoint_budget: usize,
    /// Shell command line; required for `External`.
    pub external_command: Option<String>,
    pub timeout_ms: u64,
}

impl MatcherSpec {
    pub fn builtin() -> Self {
        Self {
            kind: MatcherKind::Builtin,
            keypoint_budget: DEFAULT_KEYPOINT_BUDGET,
            external_command: None,
            timeout_ms: DEFAULT_EXTERNAL_TIMEOUT.as_millis() as u64,
        }
    }

    pub fn external(command: impl Into<String>) -> Self {
        Self {
            kind: MatcherKind::External,
            external_command: Some(command.into()),
            ..Self::builtin()
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.keypoint_budget = budget;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout_ms = timeout.as_millis() as u64;
        self
    }

    pub fn validate(&self) -> Result<(), MatchingError> {
        if self.keypoint_budget == 0 {
            return Err(MatchingError::InvalidSpec(
                "keypoint budget must be at least 1".into(),
            ));
        }
        if self.kind == MatcherKind::External
            && self
                .external_command
                .as_deref()
                .is_none_or(|c| c.trim().is_empty())
        {
            return Err(MatchingError::InvalidSpec(
                "external matcher needs a command".into(),
            ));
        }
        Ok(())
    }

    /// Report label; the keypoint budget is part of the protocol config, not
    /// the label.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl Default for MatcherSpec {
    fn default() -> Self {
        Self::builtin()
    }
}

impl fmt::Display for MatcherSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MatcherKind::Builtin => f.write_str("builtin"),
            MatcherKind::External => write!(
                f,
                "external:{}",
                self.external_command.as_deref().unwrap_or_default()
            ),
        }
    }
}

impl FromStr for MatcherSpec {
    type Err = String;

    /// `builtin` or `external:<command line>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("builtin") {
            return Ok(Self::builtin());
        }
        match s.split_once(':') {
            Some((kind, cmd)) if kind.eq_ignore_ascii_case("external") && !cmd.trim().is_empty() => {
                Ok(Self::external(cmd.trim()))
            }
            _ => Err(format!(
                "unknown matcher '{s}' (expected builtin or external:<command>)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub pos: Point2,
    pub response: f64,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with clamped borders.
fn blur(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Harris response map: 3×3 Sobel gradients, Gaussian structure-tensor
/// window, `det − k·trace²`.
pub fn harris_response(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = |dx: isize, dy: isize| img.get_clamped(x as isize + dx, y as isize + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y * w + x;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let kernel = gaussian_kernel(HARRIS_SIGMA);
    let sxx = blur(&ixx, w, h, &kernel);
    let syy = blur(&iyy, w, h, &kernel);
    let sxy = blur(&ixy, w, h, &kernel);
    sxx.iter()
        .zip(&syy)
        .zip(&sxy)
        .map(|((a, b), c)| a * b - c * c - HARRIS_K * (a + b) * (a + b))
        .collect()
}

/// Parabolic peak offset from three samples, in `[-0.5, 0.5]`.
fn peak_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom.abs() < f64::EPSILON * center.abs().max(1.0) {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Harris corners keeping at least `margin` pixels from every border, sorted
/// by descending response (ties in raster order), truncated to `budget`.
pub fn detect_keypoints_with_margin(img: &GrayImage, budget: usize, margin: usize) -> Vec<Keypoint> {
    let (w, h) = (img.width(), img.height());
    if budget == 0 || w < 3 || h < 3 {
        return Vec::new();
    }
    let resp = harris_response(img);
    let peak = resp.iter().cloned().fold(0.0f64, f64::max);
    // Flat images give a zero (up to rounding) response everywhere.
    if peak <= 1e-6 {
        return Vec::new();
    }
    let floor = peak * HARRIS_QUALITY;
    let lo = margin.max(1);
    if w <= 2 * lo || h <= 2 * lo {
        return Vec::new();
    }
    let mut found: Vec<(usize, Keypoint)> = Vec::new();
    for y in lo..h - lo {
        for x in lo..w - lo {
            let i = y * w + x;
            let r = resp[i];
            if r <= floor {
                continue;
            }
            // Strict maximum against raster-earlier neighbours, non-strict
            // against later ones, so plateaus keep exactly one pixel.
            let mut is_max = true;
            'nbr: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let j = ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
                    let earlier = j < i;
                    if resp[j] > r || (earlier && resp[j] == r) {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let ox = peak_offset(resp[i - 1], r, resp[i + 1]);
            let oy = peak_offset(resp[i - w], r, resp[i + w]);
            found.push((
                i,
                Keypoint {
                    pos: Point2::new(x as f64 + ox, y as f64 + oy),
                    response: r,
                },
            ));
        }
    }
    found.sort_by(|a, b| b.1.response.total_cmp(&a.1.response).then(a.0.cmp(&b.0)));
    found.truncate(budget);
    found.into_iter().map(|(_, k)| k).collect()
}

pub fn detect_keypoints(img: &GrayImage, budget: usize) -> Vec<Keypoint> {
    detect_keypoints_with_margin(img, budget, 1)
}

/// Mean/variance-normalized 16×16 patch sampled bilinearly around `p`;
/// `None` for flat patches.
pub fn describe(img: &GrayImage, p: Point2) -> Option<Vec<f32>> {
    let half = PATCH_SIZE as f64 / 2.0 - 0.5;
    let mut patch = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
    for j in 0..PATCH_SIZE {
        for i in 0..PATCH_SIZE {
            patch.push(img.sample_bilinear(p.x + i as f64 - half, p.y + j as f64 - half));
        }
    }
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let sd = (patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd < 1e-6 {
        return None;
    }
    Some(patch.iter().map(|v| ((v - mean) / sd) as f32).collect())
}

fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy)]
struct Nearest {
    dist2: f32,
    index: usize,
}

impl Nearest {
    const NONE: Nearest = Nearest {
        dist2: f32::INFINITY,
        index: usize::MAX,
    };

    fn better_than(&self, other: &Nearest) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

/// Mutual nearest neighbours with a ratio test over patch descriptors.
/// Confidence is `1 − best / second_best` in descriptor distance.
pub fn describe_and_match(
    src_kps: &[Keypoint],
    dst_kps: &[Keypoint],
    src_img: &GrayImage,
    dst_img: &GrayImage,
) -> Vec<Correspondence> {
    let describe_all = |kps: &[Keypoint], img: &GrayImage| -> Vec<(Point2, Vec<f32>)> {
        kps.par_iter()
            .filter_map(|k| describe(img, k.pos).map(|d| (k.pos, d)))
            .collect()
    };
    let src = describe_all(src_kps, src_img);
    let dst = describe_all(dst_kps, dst_img);
    if src.is_empty() || dst.is_empty() {
        return Vec::new();
    }

    const CHUNK: usize = 64;
    // Per source row: best and second-best destination. Per destination
    // column: best source, reduced with an order-independent min.
    let (rows, col_best) = src
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let mut rows = Vec::with_capacity(chunk.len());
            let mut cols = vec![Nearest::NONE; dst.len()];
            for (k, (_, d)) in chunk.iter().enumerate() {
                let si = chunk_idx * CHUNK + k;
                let mut best = Nearest::NONE;
                let mut second = f32::INFINITY;
                for (j, (_, e)) in dst.iter().enumerate() {
                    let cand = Nearest {
                        dist2: squared_distance(d, e),
                        index: j,
                    };
                    if cand.better_than(&best) {
                        second = second.min(best.dist2);
                        best = cand;
                    } else if cand.dist2 < second {
                        second = cand.dist2;
                    }
                    let back = Nearest {
                        dist2: cand.dist2,
                        index: si,
                    };
                    if back.better_than(&cols[j]) {
                        cols[j] = back;
                    }
                }
                rows.push((best, second));
            }
            (rows, cols)
        })
        .reduce(
            || (Vec::new(), vec![Nearest::NONE; dst.len()]),
            |(mut ra, ca), (rb, cb)| {
                ra.extend(rb);
                let merged = ca
                    .into_iter()
                    .zip(cb)
                    .map(|(a, b)| if b.better_than(&a) { b } else { a })
                    .collect();
                (ra, merged)
            },
        );

    let mut out = Vec::new();
    for (si, &(best, second)) in rows.iter().enumerate() {
        if best.index == usize::MAX || col_best[best.index].index != si {
            continue;
        }
        let d1 = f64::from(best.dist2.max(0.0)).sqrt();
        let d2 = f64::from(second.max(0.0)).sqrt();
        let ratio = if d2.is_finite() && d2 > 0.0 {
            d1 / d2
        } else if d2.is_infinite() {
            0.0
        } else {
            1.0
        };
        if ratio >= RATIO_TEST {
            continue;
        }
        out.push(Correspondence::new(
            src[si].0,
            dst[best.index].0,
            (1.0 - ratio).clamp(0.0, 1.0),
        ));
    }
    out
}

/// Builtin correspondence source over one tile pair.
pub fn builtin_match(src: &GrayImage, dst: &GrayImage, budget: usize) -> Vec<Correspondence> {
    let margin = PATCH_SIZE / 2;
    let (sk, dk) = rayon::join(
        || detect_keypoints_with_margin(src, budget, margin),
        || detect_keypoints_with_margin(dst, budget, margin),
    );
    if sk.is_empty() || dk.is_empty() {
        return Vec::new();
    }
    let mut out = describe_and_match(&sk, &dk, src, dst);
    out.truncate(budget);
    out
}

/// One-shot convenience: builds a matcher for `spec` (spawning a subprocess
/// for external matchers) and matches a single tile pair.
pub fn match_tiles(
    src_tile: &GrayImage,
    dst_tile: &GrayImage,
    spec: &MatcherSpec,
) -> Result<Vec<Correspondence>, MatchingError> {
    Matcher::from_spec(spec)?.match_tiles(src_tile, dst_tile)
}

/// A ready-to-use correspondence source.
pub enum Matcher {
    Builtin { budget: usize },
    External(ExternalMatcher),
}

impl Matcher {
    pub fn from_spec(spec: &MatcherSpec) -> Result<Matcher, MatchingError> {
        spec.validate()?;
        Ok(match spec.kind {
            MatcherKind::Builtin => Matcher::Builtin {
                budget: spec.keypoint_budget,
            },
            MatcherKind::External => Matcher::External(ExternalMatcher::new(
                spec.external_command.clone().unwrap_or_default(),
                spec.keypoint_budget,
                Duration::from_millis(spec.timeout_ms),
            )?),
        })
    }

    /// Tile-local correspondences, at most the keypoint budget. An empty
    /// list is a valid result.
    pub fn match_tiles(
        &self,
        src: &GrayImage,
        dst: &GrayImage,
    ) -> Result<Vec<Correspondence>, MatchingError> {
        match self {
            Matcher::Builtin { budget } => Ok(builtin_match(src, dst, *budget)),
            Matcher::External(ext) => ext.match_tiles(src, dst),
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self, Matcher::External(_))
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Persistent adapter subprocess in line-batch mode. Requests are
/// serialized; the process is restarted after any protocol violation.
pub struct ExternalMatcher {
    command: String,
    budget: usize,
    timeout: Duration,
    session: Mutex<Option<Session>>,
    workdir: tempfile::TempDir,
    next_id: AtomicU64,
}

impl ExternalMatcher {
    pub fn new(command: String, budget: usize, timeout: Duration) -> Result<Self, MatchingError> {
        Ok(Self {
            command,
            budget,
            timeout,
            session: Mutex::new(None),
            workdir: tempfile::Builder::new().prefix("xmreg-tiles").tempdir()?,
            next_id: AtomicU64::new(0),
        })
    }

    fn spawn(&self) -> Result<Session, MatchingError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                MatchingError::ExternalMatcherFailure(format!("cannot spawn '{}': {e}", self.command))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Session {
            child,
            stdin,
            lines: rx,
        })
    }

    pub fn match_tiles(
        &self,
        src: &GrayImage,
        dst: &GrayImage,
    ) -> Result<Vec<Correspondence>, MatchingError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let src_path = self.workdir.path().join(format!("{id}_src.png"));
        let dst_path = self.workdir.path().join(format!("{id}_dst.png"));
        src.save_png(&src_path)?;
        dst.save_png(&dst_path)?;

        let mut guard = self.session.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let session = guard.as_mut().expect("session present");
        let outcome = exchange(session, id, &src_path, &dst_path, self.timeout);
        let _ = std::fs::remove_file(&src_path);
        let _ = std::fs::remove_file(&dst_path);
        match outcome {
            Ok(mut corrs) => {
                if corrs.len() > self.budget {
                    corrs.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                    corrs.truncate(self.budget);
                }
                Ok(corrs)
            }
            Err(Failure::Reported(msg)) => Err(MatchingError::ExternalMatcherFailure(msg)),
            Err(Failure::Broken(msg)) => {
                *guard = None;
                Err(MatchingError::ExternalMatcherFailure(msg))
            }
        }
    }
}

enum Failure {
    /// `ERR` line; the stream is still in sync.
    Reported(String),
    /// Protocol violation, exit or timeout; the session must be discarded.
    Broken(String),
}

fn exchange(
    session: &mut Session,
    id: u64,
    src: &std::path::Path,
    dst: &std::path::Path,
    timeout: Duration,
) -> Result<Vec<Correspondence>, Failure> {
    let request = format!("MATCH {id} {} {}\n", src.display(), dst.display());
    session
        .stdin
        .write_all(request.as_bytes())
        .and_then(|_| session.stdin.flush())
        .map_err(|e| Failure::Broken(format!("write to adapter failed: {e}")))?;

    let deadline = Instant::now() + timeout;
    let next_line = || -> Result<String, Failure> {
        let left = deadline.saturating_duration_since(Instant::now());
        match session.lines.recv_timeout(left) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Failure::Broken(format!("read from adapter failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Failure::Broken(format!(
                "request {id} timed out after {:.1}s",
                timeout.as_secs_f64()
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Failure::Broken("adapter closed its output".into()))
            }
        }
    };

    let header = next_line()?;
    let mut parts = header.split_whitespace();
    let count = match (parts.next(), parts.next()) {
        (Some("BEGIN"), Some(rid)) if rid == id.to_string() => parts
            .next()
            .and_then(|c| c.parse::<usize>().ok())
            .filter(|_| parts.next().is_none())
            .ok_or_else(|| Failure::Broken(format!("malformed BEGIN line: '{header}'")))?,
        (Some("ERR"), Some(rid)) if rid == id.to_string() => {
            let msg = header
                .splitn(3, ' ')
                .nth(2)
                .unwrap_or("unspecified error")
                .to_string();
            return Err(Failure::Reported(msg));
        }
        _ => {
            return Err(Failure::Broken(format!(
                "unexpected response to request {id}: '{header}'"
            )))
        }
    };
    let mut corrs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        corrs.push(parse_match_line(&line).map_err(Failure::Broken)?);
    }
    let end = next_line()?;
    if end.split_whitespace().collect::<Vec<_>>() != ["END", id.to_string().as_str()] {
        return Err(Failure::Broken(format!("expected 'END {id}', got '{end}'")));
    }
    Ok(corrs)
}

/// Parses `x0 y0 x1 y1 conf`.
pub fn parse_match_line(line: &str) -> Result<Correspondence, String> {
    let vals = line
        .split_whitespace()
        .map(str::parse::<f64>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| format!("malformed match line '{line}': {e}"))?;
    let [x0, y0, x1, y1, conf] = vals[..] else {
        return Err(format!("expected 5 fields in match line '{line}'"));
    };
    if !vals.iter().all(|v| v.is_finite()) {
        return Err(format!("non-finite value in match line '{line}'"));
    }
    if !(0.0..=1.0).contains(&conf) {
        return Err(format!("confidence {conf} outside [0, 1]"));
    }
    Ok(Correspondence::new(Point2::new(x0, y0), Point2::new(x1, y1), conf))
}

/// Formats one correspondence as a wire-protocol match line. `{}` on `f64`
/// prints the shortest representation that parses back exactly.
pub fn format_match_line(c: &Correspondence) -> String {
    format!("{} {} {} {} {}", c.src.x, c.src.y, c.dst.x, c.dst.y, c.confidence)
}
