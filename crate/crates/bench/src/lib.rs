//! Fixtures shared by the benchmarks.

use lanemap_core::pcio::GeoPoint;
use lanemap_core::raster::Mask;
use lanemap_core::synth::{generate_scene, Scene, SceneSpec, SensorSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A branch-sized mask: three long dashed lane lines plus sparse speckle.
pub fn lane_mask(width: usize, height: usize, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mask::new(width, height);
    for row in [height / 4, height / 2, 3 * height / 4] {
        for x in (0..width).filter(|x| x % 333 < 133) {
            for y in row..(row + 5).min(height) {
                m.set(x, y, true);
            }
        }
    }
    for _ in 0..width * height / 200 {
        m.set(rng.random_range(0..width), rng.random_range(0..height), true);
    }
    m
}

/// A 1 m × 12 m swath of road points with a crown, a curb step and noise.
pub fn swath_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let y: f64 = rng.random_range(-8.0..8.0);
            let z = if y.abs() > 6.0 { 0.15 } else { -0.002 * y * y } + rng.random_range(-0.02..0.02);
            [rng.random_range(0.0..1.0), y, z]
        })
        .collect()
}

/// A sparse default X intersection, small enough to extract in well under a second.
pub fn small_scene(seed: u64) -> Scene {
    let spec = SceneSpec {
        sensor: SensorSpec {
            density: 150.0,
            ..SensorSpec::default()
        },
        ..SceneSpec::default()
    };
    generate_scene(&spec, seed).expect("default spec is valid")
}

pub fn points_of(scene: &Scene) -> Vec<GeoPoint> {
    scene.cloud().expect("scene cloud").into_points()
}
