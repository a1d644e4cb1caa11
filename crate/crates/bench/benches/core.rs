use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use xmreg_bench::{planted_correspondences, scene};
use xmreg_core::geometry::{fit_affine_lsq, fit_homography_dlt, ransac_fit, GeometryKind, Point2, RansacParams};
use xmreg_core::matching::{builtin_match, detect_keypoints, DEFAULT_KEYPOINT_BUDGET};
use xmreg_core::pipeline::{run_images, RunOptions, Supervision};
use xmreg_core::{Matcher, MatcherSpec, ProtocolConfig};

fn solvers(c: &mut Criterion) {
    let corrs = planted_correspondences(1, 200, 200);
    let src: Vec<Point2> = corrs.iter().map(|c| c.src).collect();
    let dst: Vec<Point2> = corrs.iter().map(|c| c.dst).collect();
    c.bench_function("affine_lsq_200", |b| b.iter(|| fit_affine_lsq(black_box(&src), black_box(&dst))));
    c.bench_function("homography_dlt_4", |b| b.iter(|| fit_homography_dlt(black_box(&src[..4]), black_box(&dst[..4]))));
    c.bench_function("homography_dlt_200", |b| b.iter(|| fit_homography_dlt(black_box(&src), black_box(&dst))));
}

fn ransac(c: &mut Criterion) {
    let corrs = planted_correspondences(2, 1000, 400);
    for kind in [GeometryKind::Affine, GeometryKind::Homography] {
        let params = RansacParams {
            reproj_threshold: 3.0,
            ..RansacParams::default()
        };
        c.bench_function(&format!("ransac_{}_1000_40pct", kind.as_str()), |b| {
            b.iter(|| ransac_fit(black_box(&corrs), kind, &params))
        });
    }
}

fn matching(c: &mut Criterion) {
    let pair = scene(256, 3);
    c.bench_function("harris_256", |b| b.iter(|| detect_keypoints(black_box(&pair.optical), DEFAULT_KEYPOINT_BUDGET)));
    c.bench_function("builtin_match_256", |b| {
        b.iter(|| builtin_match(black_box(&pair.optical), black_box(&pair.sar_like), DEFAULT_KEYPOINT_BUDGET))
    });
}

fn pipeline(c: &mut Criterion) {
    let pair = scene(512, 4);
    let matcher = Matcher::from_spec(&MatcherSpec::builtin()).unwrap();
    let config = ProtocolConfig {
        tile_size: 256,
        tile_overlap: 64,
        ..ProtocolConfig::default()
    };
    let supervision = Supervision::TiePoints(pair.tiepoints.clone());
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("tiled_512", |b| {
        b.iter(|| run_images("bench", &pair.optical, &pair.sar_like, &supervision, &config, &matcher, &RunOptions::default()))
    });
    group.finish();
}

criterion_group!(benches, solvers, ransac, matching, pipeline);
criterion_main!(benches);
