use criterion::{black_box, criterion_group, criterion_main, Criterion};

use lensless_core::tactile::{
    calibrate_lut, depth_from_image, marker_grid, render_markers, simulate_tactile_image, track_markers, DepthMap,
    LightingConfig, SpherePress,
};

fn depth(c: &mut Criterion) {
    let (size, pitch) = (200, 0.04);
    let center = (99.5, 99.5);
    let lighting = LightingConfig::default();
    let press =
        |h: f64| simulate_tactile_image(&DepthMap::sphere(size, size, pitch, 3.0, h, center).unwrap(), &lighting);
    let presses: Vec<SpherePress> = [0.5, 1.0, 1.5]
        .iter()
        .map(|&h| SpherePress {
            image: press(h).unwrap(),
            press: h,
            center,
        })
        .collect();
    let lut = calibrate_lut(&presses, 3.0, pitch, 32).unwrap();
    let bg = simulate_tactile_image(&DepthMap::flat(size, size, pitch).unwrap(), &lighting).unwrap();
    let img = press(0.8).unwrap();
    c.bench_function("depth_from_image_200", |b| {
        b.iter(|| depth_from_image(black_box(&img), &lut, &bg, pitch).unwrap())
    });
}

fn markers(c: &mut Criterion) {
    let base = marker_grid(8, 12.0, (24.0, 24.0));
    let reference = track_markers(&render_markers(132, 132, &base, 3.0), None);
    let moved: Vec<(f64, f64)> = base.iter().map(|p| (p.0 + 0.4, p.1 - 0.3)).collect();
    let frame = render_markers(132, 132, &moved, 3.0);
    c.bench_function("track_markers_8x8", |b| {
        b.iter(|| track_markers(black_box(&frame), Some(&reference)))
    });
}

criterion_group!(benches, depth, markers);
criterion_main!(benches);
