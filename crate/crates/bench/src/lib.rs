//! Fixtures shared by the benchmarks in `benches/`.

use xmreg_core::geometry::{AffineTransform, Correspondence, Point2};
use xmreg_core::seed::splitmix64;
use xmreg_core::synthgen::{generate_pair, near_identity_affine, SynthPair, SynthSpec};

/// Uniform in `[0, 1)` from a splitmix stream.
fn unit(state: &mut u64) -> f64 {
    *state = splitmix64(*state);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

/// `n` correspondences in a 1000 px square; the first `inliers` follow a
/// small similarity with sub-pixel jitter, the rest are uniform outliers.
pub fn planted_correspondences(seed: u64, n: usize, inliers: usize) -> Vec<Correspondence> {
    let mut s = seed;
    let t = AffineTransform::similarity(1.02, 0.05, 12.0, -7.0);
    (0..n)
        .map(|i| {
            let p = Point2::new(1000.0 * unit(&mut s), 1000.0 * unit(&mut s));
            let q = if i < inliers {
                let g = t.apply(p);
                Point2::new(g.x + unit(&mut s) - 0.5, g.y + unit(&mut s) - 0.5)
            } else {
                Point2::new(1000.0 * unit(&mut s), 1000.0 * unit(&mut s))
            };
            Correspondence::new(p, q, 1.0)
        })
        .collect()
}

/// A clean synthetic pair with a near-identity affine warp.
pub fn scene(size: usize, seed: u64) -> SynthPair {
    let spec = SynthSpec {
        planted_transform: near_identity_affine(seed, size, size).into(),
        ..SynthSpec::identity(size, size, seed)
    };
    generate_pair(&spec).expect("valid synthetic spec")
}
