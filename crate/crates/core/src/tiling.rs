//! Overlapping tile grids and tile-to-scene coordinate mapping.

use crate::geometry::{Correspondence, Point2};
use crate::imaging::GrayImage;

/// Tile layout over one image. Origins are tile top-left offsets in the
/// (resized) image frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap: usize,
    pub width: usize,
    pub height: usize,
    pub x_origins: Vec<usize>,
    pub y_origins: Vec<usize>,
}

impl TileGrid {
    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }

    pub fn rows(&self) -> usize {
        self.y_origins.len()
    }

    pub fn cols(&self) -> usize {
        self.x_origins.len()
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(row, col, x0, y0)` in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        self.y_origins.iter().enumerate().flat_map(move |(r, &y0)| {
            self.x_origins
                .iter()
                .enumerate()
                .map(move |(c, &x0)| (r, c, x0, y0))
        })
    }

    /// Tile extent at `(x0, y0)`, clipped to the image.
    pub fn extent(&self, x0: usize, y0: usize) -> (usize, usize) {
        (
            self.tile_size.min(self.width - x0),
            self.tile_size.min(self.height - y0),
        )
    }
}

/// Origins along one axis: multiples of the stride, plus a final origin
/// clamped to `dim − tile_size` when the regular ones stop short of the edge.
pub fn axis_origins(dim: usize, tile_size: usize, overlap: usize) -> Vec<usize> {
    assert!(tile_size >= 1 && overlap < tile_size, "invalid tile geometry");
    if dim <= tile_size {
        return vec![0];
    }
    let stride = tile_size - overlap;
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + tile_size <= dim)
        .collect();
    let last = *origins.last().expect("dim > tile_size admits origin 0");
    if last + tile_size < dim {
        origins.push(dim - tile_size);
    }
    origins.dedup();
    origins
}

/// Panics unless `tile_size >= 1` and `overlap < tile_size`.
pub fn build_grid(width: usize, height: usize, tile_size: usize, overlap: usize) -> TileGrid {
    TileGrid {
        tile_size,
        overlap,
        width,
        height,
        x_origins: axis_origins(width, tile_size, overlap),
        y_origins: axis_origins(height, tile_size, overlap),
    }
}

/// Same-index tiles cropped from the source and destination images.
#[derive(Debug, Clone)]
pub struct TilePair {
    pub index: (usize, usize),
    pub src_tile: GrayImage,
    pub dst_tile: GrayImage,
    pub src_origin: (usize, usize),
    pub dst_origin: (usize, usize),
}

/// Pairs tiles by identical `(row, col)`; indices present in only one grid
/// are dropped.
pub fn tile_pairs(
    src: &GrayImage,
    dst: &GrayImage,
    src_grid: &TileGrid,
    dst_grid: &TileGrid,
) -> Vec<TilePair> {
    let rows = src_grid.rows().min(dst_grid.rows());
    let cols = src_grid.cols().min(dst_grid.cols());
    let mut pairs = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (sx, sy) = (src_grid.x_origins[c], src_grid.y_origins[r]);
            let (dx, dy) = (dst_grid.x_origins[c], dst_grid.y_origins[r]);
            let (sw, sh) = src_grid.extent(sx, sy);
            let (dw, dh) = dst_grid.extent(dx, dy);
            pairs.push(TilePair {
                index: (r, c),
                src_tile: src.crop(sx, sy, sw, sh),
                dst_tile: dst.crop(dx, dy, dw, dh),
                src_origin: (sx, sy),
                dst_origin: (dx, dy),
            });
        }
    }
    pairs
}

fn to_full(p: Point2, origin: (usize, usize), scale: f64) -> Point2 {
    Point2::new(
        (p.x + origin.0 as f64) / scale,
        (p.y + origin.1 as f64) / scale,
    )
}

/// Maps tile-local correspondences to full-resolution scene coordinates,
/// `(local + origin) / scale` on each side independently.
pub fn project_to_full_frame(
    corrs: &[Correspondence],
    src_origin: (usize, usize),
    dst_origin: (usize, usize),
    src_scale: f64,
    dst_scale: f64,
) -> Vec<Correspondence> {
    debug_assert!(src_scale > 0.0 && src_scale <= 1.0);
    debug_assert!(dst_scale > 0.0 && dst_scale <= 1.0);
    corrs
        .iter()
        .map(|c| Correspondence {
            src: to_full(c.src, src_origin, src_scale),
            dst: to_full(c.dst, dst_origin, dst_scale),
            confidence: c.confidence,
        })
        .collect()
}

/// Concatenates per-tile sets in ascending `(row, col)` order regardless of
/// the order they arrive in. Within-tile order is preserved.
pub fn aggregate(mut per_tile: Vec<((usize, usize), Vec<Correspondence>)>) -> Vec<Correspondence> {
    per_tile.sort_by_key(|(idx, _)| *idx);
    per_tile.into_iter().flat_map(|(_, v)| v).collect()
}
