//! Benchmarks for the per-step hot paths: trilinear sampling, anchor
//! decoding, ray compositing (forward and backward), and a whole
//! training step on a small scene.

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use raysplat_core::decoder::{decode_all, DecoderHeads, GaussianParams};
use raysplat_core::driver::{init_state, train_step, SceneSource, TrainConfig};
use raysplat_core::geometry::{Quaternion, Ray};
use raysplat_core::masking::MaskConfig;
use raysplat_core::rays::{AnchorSet, RayBatch, TargetRay};
use raysplat_core::render::{
    render_backward, render_forward, RenderMode, RenderUpstream,
};
use raysplat_core::synth::SceneConfig;
use raysplat_core::voxel::{
    extract_target_voxels, trilinear_sample, GridGeometry, VoxelGrid,
};

fn desk_geometry() -> GridGeometry {
    GridGeometry::new(
        Vector3::new(-6.4, -6.4, -0.4),
        Vector3::new(6.4, 6.4, 2.8),
        [32, 32, 8],
    )
    .unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, channels: usize) -> VoxelGrid {
    let mut grid = VoxelGrid::zeros(desk_geometry(), channels);
    for v in &mut grid.features {
        *v = rng.gen_range(-0.5..0.5);
    }
    grid
}

fn random_anchors(rng: &mut ChaCha8Rng, rays: usize, per_ray: usize) -> AnchorSet {
    let n = rays * per_ray;
    let mut depths = Vec::with_capacity(n);
    for _ in 0..rays {
        let mut ds: Vec<f64> = (0..per_ray).map(|_| rng.gen_range(0.5..12.0)).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (j, d) in ds.into_iter().enumerate() {
            depths.push(d + j as f64 * 1e-4);
        }
    }
    AnchorSet {
        anchors_per_ray: per_ray,
        positions: (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-6.0..6.0),
                    rng.gen_range(-6.0..6.0),
                    rng.gen_range(-0.3..2.7),
                )
            })
            .collect(),
        depths,
    }
}

fn random_batch(rays: usize) -> RayBatch {
    RayBatch {
        rays: (0..rays)
            .map(|i| TargetRay {
                camera_index: 0,
                pixel: ((i % 64) as u32, (i / 64) as u32),
                ray: Ray {
                    origin: Vector3::zeros(),
                    direction: Vector3::new(0.0, 0.0, 1.0),
                    source_pixel: Vector2::new((i % 64) as f64, (i / 64) as f64),
                },
                lidar_depth: Some(5.0),
            })
            .collect(),
    }
}

fn random_params(rng: &mut ChaCha8Rng, n: usize) -> GaussianParams {
    GaussianParams {
        colors: (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect(),
        opacities: (0..n).map(|_| rng.gen_range(0.01..0.95)).collect(),
        rotations: vec![Quaternion::new(1.0, 0.0, 0.0, 0.0); n],
        scales: vec![Vector3::new(0.4, 0.4, 0.4); n],
    }
}

fn bench_trilinear(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = random_grid(&mut rng, 32);
    let points: Vec<Vector3<f64>> = (0..1000)
        .map(|_| {
            Vector3::new(
                rng.gen_range(-6.4..6.4),
                rng.gen_range(-6.4..6.4),
                rng.gen_range(-0.4..2.8),
            )
        })
        .collect();
    let mut group = c.benchmark_group("trilinear");
    group.throughput(Throughput::Elements(points.len() as u64));
    group.bench_function("sample_1000_points_32ch", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for p in &points {
                acc += trilinear_sample(&grid, p).features[0];
            }
            acc
        })
    });
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = random_grid(&mut rng, 32);
    let heads = DecoderHeads::init(32, &[64, 64], 0).unwrap();
    let anchors = random_anchors(&mut rng, 128, 8);
    let mut group = c.benchmark_group("decode");
    group.throughput(Throughput::Elements(anchors.positions.len() as u64));
    group.bench_function("decode_1024_anchors", |b| {
        b.iter(|| decode_all(&grid, &heads, &anchors).unwrap())
    });
    group.finish();
}

fn bench_compositing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rays = 1024;
    let per_ray = 32;
    let batch = random_batch(rays);
    let anchors = random_anchors(&mut rng, rays, per_ray);
    let params = random_params(&mut rng, rays * per_ray);
    let geometry = desk_geometry();
    let targets = extract_target_voxels(&anchors, &geometry);
    let forward = || {
        render_forward(
            RenderMode::Ray,
            &batch,
            &anchors,
            &params,
            &targets,
            &[],
            32,
        )
        .unwrap()
    };
    let output = forward();
    let upstream = RenderUpstream {
        colors: vec![[1.0; 3]; rays],
        depths: vec![1.0; rays],
        occupancy: vec![1.0; targets.len()],
    };

    let mut group = c.benchmark_group("compositing");
    group.throughput(Throughput::Elements((rays * per_ray) as u64));
    group.bench_function("forward_1024x32", |b| b.iter(forward));
    group.bench_function("backward_1024x32", |b| {
        b.iter(|| {
            render_backward(
                RenderMode::Ray,
                &batch,
                &anchors,
                &params,
                &targets,
                &[],
                &output,
                &upstream,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let config = TrainConfig {
        scene: SceneSource::Generate(SceneConfig {
            seed: 4,
            camera_count: 2,
            image_width: 48,
            image_height: 48,
            boxes: 3,
            ..SceneConfig::default()
        }),
        grid: GridGeometry::new(
            Vector3::new(-6.4, -6.4, -0.4),
            Vector3::new(6.4, 6.4, 2.8),
            [16, 16, 4],
        )
        .unwrap(),
        channels: 8,
        hidden: vec![16],
        mask: MaskConfig {
            patch_size: 8,
            ..MaskConfig::default()
        },
        ray_budget: 128,
        anchors_per_ray: 16,
        anchor_depth_range: [0.5, 12.8],
        seed: 4,
        ..TrainConfig::default()
    };
    let mut state = init_state(config).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    // Each iteration advances the same run by one step, so the bench
    // measures a step of ongoing training rather than step 0 repeatedly.
    group.bench_function("step_128_rays_x16_anchors", |b| {
        b.iter(|| train_step(&mut state).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_trilinear,
    bench_decode,
    bench_compositing,
    bench_train_step
);
criterion_main!(benches);
