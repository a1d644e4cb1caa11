//! Deterministic evaluation engine for cross-modal (optical to SAR) image
//! registration.
//!
//! A scene pair flows through four stages: intensity normalization and
//! resizing, tiled correspondence extraction, robust geometric fitting, and
//! displacement prediction on ground-truth tie points or image corners. The
//! [`sweep`] module runs whole protocol grids over pair manifests and writes
//! reproducible CSV/JSON reports; [`synthgen`] produces scenes with exact
//! ground truth so every stage can be checked against an oracle.

pub mod geometry;
pub mod imaging;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod sweep;
pub mod synthgen;
pub mod tiling;

pub use geometry::{
    AffineTransform, Correspondence, FitResult, GeometricTransform, GeometryError, GeometryKind,
    Homography, Point2, RansacParams,
};
pub use imaging::{GrayImage, NormalizationKind};
pub use matching::{Matcher, MatcherKind, MatcherSpec, MatchingError};
pub use metrics::MetricSummary;
pub use pipeline::{PairResult, PairStatus, TiePoint};
pub use retrieval::{RetrievalQuery, RetrievalSummary};
pub use sweep::{ProtocolConfig, ScenePairManifest, SweepGrid};
pub use synthgen::SynthSpec;
pub use tiling::{TileGrid, TilePair};
