//! Grayscale working images, intensity normalization and resizing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("unsupported band count {0} (expected 1 or 3)")]
    UnsupportedBandCount(usize),
    #[error("unsupported sample format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid image dimensions {width}x{height} for {len} samples")]
    InvalidDimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: String,
        source: image::ImageError,
    },
}

/// Row-major single-band image with continuous intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(ImagingError::InvalidDimensions {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn long_side(&self) -> usize {
        self.width.max(self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel with coordinates clamped to the image.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample at a continuous position; edges clamp.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Sub-image `[x0, x0 + w) × [y0, y0 + h)`, clipped to the image bounds.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> GrayImage {
        let x0 = x0.min(self.width - 1);
        let y0 = y0.min(self.height - 1);
        let w = w.min(self.width - x0).max(1);
        let h = h.min(self.height - y0).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds to 8-bit for PNG output.
    pub fn to_luma8(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        let path = path.as_ref();
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImagingError::Write {
                path: path.display().to_string(),
                source,
            })
    }

    /// Reads PNG or TIFF rasters (1 or 3 bands, 8 or 16 bit).
    pub fn load(path: impl AsRef<Path>) -> Result<GrayImage, ImagingError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| ImagingError::Read {
            path: path.display().to_string(),
            source,
        })?;
        to_gray(&Raster::try_from(img)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

/// Interleaved multi-band raster as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub samples: Samples,
}

impl TryFrom<DynamicImage> for Raster {
    type Error = ImagingError;

    fn try_from(img: DynamicImage) -> Result<Self, Self::Error> {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let bands = usize::from(img.color().channel_count());
        let samples = match img {
            DynamicImage::ImageLuma8(b) => Samples::U8(b.into_raw()),
            DynamicImage::ImageLumaA8(b) => Samples::U8(b.into_raw()),
            DynamicImage::ImageRgb8(b) => Samples::U8(b.into_raw()),
            DynamicImage::ImageRgba8(b) => Samples::U8(b.into_raw()),
            DynamicImage::ImageLuma16(b) => Samples::U16(b.into_raw()),
            DynamicImage::ImageLumaA16(b) => Samples::U16(b.into_raw()),
            DynamicImage::ImageRgb16(b) => Samples::U16(b.into_raw()),
            DynamicImage::ImageRgba16(b) => Samples::U16(b.into_raw()),
            other => return Err(ImagingError::UnsupportedFormat(format!("{:?}", other.color()))),
        };
        Ok(Raster {
            width,
            height,
            bands,
            samples,
        })
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Converts a 1- or 3-band raster to the working grayscale representation.
/// 16-bit data is min-max rescaled to `[0, 255]` first.
pub fn to_gray(raster: &Raster) -> Result<GrayImage, ImagingError> {
    if raster.bands != 1 && raster.bands != 3 {
        return Err(ImagingError::UnsupportedBandCount(raster.bands));
    }
    let values: Vec<f64> = match &raster.samples {
        Samples::U8(v) => v.iter().map(|&s| f64::from(s)).collect(),
        Samples::U16(v) => {
            let lo = v.iter().copied().min().unwrap_or(0);
            let hi = v.iter().copied().max().unwrap_or(0);
            let span = f64::from(hi - lo);
            v.iter()
                .map(|&s| {
                    if span > 0.0 {
                        f64::from(s - lo) * 255.0 / span
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    let data = if raster.bands == 1 {
        values
    } else {
        values
            .chunks_exact(3)
            .map(|px| (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]).clamp(0.0, 255.0))
            .collect()
    };
    GrayImage::new(raster.width, raster.height, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationKind {
    #[default]
    Identity,
    Percentile,
    ZScore,
    Clahe,
}

impl NormalizationKind {
    pub const ALL: [NormalizationKind; 4] = [
        NormalizationKind::Identity,
        NormalizationKind::Percentile,
        NormalizationKind::ZScore,
        NormalizationKind::Clahe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationKind::Identity => "identity",
            NormalizationKind::Percentile => "percentile",
            NormalizationKind::ZScore => "zscore",
            NormalizationKind::Clahe => "clahe",
        }
    }
}

impl fmt::Display for NormalizationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormalizationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "identity" | "none" => Ok(NormalizationKind::Identity),
            "percentile" => Ok(NormalizationKind::Percentile),
            "zscore" => Ok(NormalizationKind::ZScore),
            "clahe" => Ok(NormalizationKind::Clahe),
            _ => Err(format!(
                "unknown normalization '{s}' (expected identity, percentile, zscore or clahe)"
            )),
        }
    }
}

pub const PERCENTILE_LOW: f64 = 2.0;
pub const PERCENTILE_HIGH: f64 = 98.0;
pub const CLAHE_CLIP_LIMIT: f64 = 2.0;
pub const CLAHE_GRID: usize = 8;

/// Percentile of an already sorted slice, linear interpolation between
/// order statistics at rank `p/100 · (n − 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn normalize(img: &GrayImage, kind: NormalizationKind) -> GrayImage {
    match kind {
        NormalizationKind::Identity => img.clone(),
        NormalizationKind::Percentile => normalize_percentile(img),
        NormalizationKind::ZScore => normalize_zscore(img),
        NormalizationKind::Clahe => clahe(img, CLAHE_GRID, CLAHE_CLIP_LIMIT),
    }
}

fn normalize_percentile(img: &GrayImage) -> GrayImage {
    let mut sorted = img.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, PERCENTILE_LOW);
    let hi = percentile_sorted(&sorted, PERCENTILE_HIGH);
    if hi - lo < 1e-6 {
        return img.clone();
    }
    let gain = 255.0 / (hi - lo);
    img.map(|v| ((v - lo) * gain).clamp(0.0, 255.0))
}

fn normalize_zscore(img: &GrayImage) -> GrayImage {
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-9 {
        return img.clone();
    }
    img.map(|v| (128.0 + 64.0 * (v - mean) / sd).clamp(0.0, 255.0))
}

/// Bounds of part `i` of `n` nearly equal parts of `len`.
fn split_bounds(len: usize, n: usize, i: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

/// Contrast-limited adaptive histogram equalization on a `grid × grid` tile
/// layout. `clip_limit` is relative to the uniform bin height.
pub fn clahe(img: &GrayImage, grid: usize, clip_limit: f64) -> GrayImage {
    let (lo, hi) = img.min_max();
    if hi - lo < 1e-6 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let gx = grid.min(w).max(1);
    let gy = grid.min(h).max(1);
    let bin = |v: f64| (v.clamp(0.0, 255.0) as usize).min(255);

    // Per-tile lookup tables.
    let mut luts = vec![[0.0f64; 256]; gx * gy];
    for ty in 0..gy {
        let (y0, y1) = split_bounds(h, gy, ty);
        for tx in 0..gx {
            let (x0, x1) = split_bounds(w, gx, tx);
            let mut hist = [0.0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bin(img.get(x, y))] += 1.0;
                }
            }
            let count = ((x1 - x0) * (y1 - y0)) as f64;
            let limit = (clip_limit * count / 256.0).max(1.0);
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > limit {
                    excess += *b - limit;
                    *b = limit;
                }
            }
            let share = excess / 256.0;
            let lut = &mut luts[ty * gx + tx];
            let mut cdf = 0.0;
            for (b, slot) in hist.iter().zip(lut.iter_mut()) {
                cdf += b + share;
                *slot = (cdf * 255.0 / count).clamp(0.0, 255.0);
            }
        }
    }

    // Tile centers for interpolation.
    let centers = |len: usize, n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let (a, b) = split_bounds(len, n, i);
                (a + b) as f64 / 2.0 - 0.5
            })
            .collect()
    };
    let cx = centers(w, gx);
    let cy = centers(h, gy);
    // Neighbouring tile indices and weight along one axis; clamped at edges.
    let locate = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        let last = c.len() - 1;
        if p >= c[last] {
            return (last, last, 0.0);
        }
        let i = c.partition_point(|&v| v <= p) - 1;
        (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
    };
    let xs: Vec<_> = (0..w).map(|x| locate(&cx, x as f64)).collect();

    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ty0, ty1, fy) = locate(&cy, y as f64);
        for (x, &(tx0, tx1, fx)) in xs.iter().enumerate() {
            let b = bin(img.get(x, y));
            let v00 = luts[ty0 * gx + tx0][b];
            let v01 = luts[ty0 * gx + tx1][b];
            let v10 = luts[ty1 * gx + tx0][b];
            let v11 = luts[ty1 * gx + tx1][b];
            let top = v00 * (1.0 - fx) + v01 * fx;
            let bottom = v10 * (1.0 - fx) + v11 * fx;
            out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 255.0));
        }
    }
    GrayImage {
        width: w,
        height: h,
        data: out,
    }
}

/// Downscales so the long side equals `max_dimension`, bilinear. Returns the
/// applied scale `s`; resized pixel `(x, y)` samples source position
/// `(x / s, y / s)`, so full-resolution coordinates are recovered by dividing
/// by `s`.
pub fn resize_long_side(img: &GrayImage, max_dimension: usize) -> (GrayImage, f64) {
    assert!(max_dimension >= 1, "max_dimension must be at least 1");
    let long = img.long_side();
    if long <= max_dimension {
        return (img.clone(), 1.0);
    }
    let s = max_dimension as f64 / long as f64;
    let scaled = |d: usize| -> usize {
        if d == long {
            max_dimension
        } else {
            ((d as f64 * s).round() as usize).max(1)
        }
    };
    let (w, h) = (scaled(img.width), scaled(img.height));
    let out = GrayImage::from_fn(w, h, |x, y| img.sample_bilinear(x as f64 / s, y as f64 / s));
    (out, s)
}
