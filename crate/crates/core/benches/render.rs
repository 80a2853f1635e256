//! Parallel against sequential execution of the same render paths.
//!
//! Worker count follows `ERM_THREADS`. Built with `--no-default-features` both
//! variants run the plain loop.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use erm_core::diff::{Ctx, ParamStore, Tape};
use erm_core::fields::Field;
use erm_core::par;
use erm_core::primitives::{rasterize, render_splats, DirectionSet, GaussianInit, GaussianSet};
use erm_core::sampling::SamplerMode;
use erm_core::volren::{render_image, Camera, ImageBuffer, SamplerConfig, VolumePipeline, WHITE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn volume_setup() -> (VolumePipeline, ParamStore, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let field = Field::grid(&mut store, "field", 32, 4, 10.0, &mut rng).unwrap();
    let coarse = Field::grid(&mut store, "coarse", 16, 4, 10.0, &mut rng).unwrap();
    let pipe = VolumePipeline {
        field,
        coarse: Some(coarse),
        gauge: None,
        sampler: SamplerConfig {
            n_coarse: 16,
            n_fine: 32,
            mode: SamplerMode::Heuristic,
            union: false,
        },
        background: WHITE,
    };
    let cam = Camera::look_at([2.2, 0.5, 0.9], [0.5; 3], [0.0, 0.0, 1.0], 0.9, 32, 32);
    (pipe, store, cam)
}

fn splat_setup(n: usize, size: usize) -> (GaussianSet, ParamStore, Camera, ImageBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inits: Vec<GaussianInit> = (0..n)
        .map(|_| GaussianInit {
            mu: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), 0.5],
            scale: [rng.random_range(0.02..0.08), rng.random_range(0.02..0.08), 0.05],
            rot: [1.0, 0.0, 0.0, rng.random_range(-0.5..0.5)],
            opacity: rng.random_range(0.3..0.9),
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let mut store = ParamStore::new();
    let set = GaussianSet::new(&mut store, &inits, DirectionSet::circle(16), None).unwrap();
    let dist = 10.0;
    let fov = 2.0 * (0.5f64 / dist).atan();
    let cam = Camera::look_at([0.5, 0.5, 0.5 - dist], [0.5; 3], [0.0, -1.0, 0.0], fov, size, size);
    let target = ImageBuffer::filled(size, size, [0.4, 0.5, 0.6]);
    (set, store, cam, target)
}

fn both<F: Fn() + Copy>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", par::workers()), |b| b.iter(f));
    g.bench_function("sequential", |b| b.iter(|| par::sequential(f)));
    g.finish();
}

fn bench_volume(c: &mut Criterion) {
    let (pipe, store, cam) = volume_setup();
    both(c, "render_image_32px", || {
        black_box(render_image(&pipe, &store, &cam));
    });
}

fn bench_splats(c: &mut Criterion) {
    let (set, store, cam, target) = splat_setup(200, 64);
    both(c, "rasterize_200_splats_64px", || {
        black_box(rasterize(&set, &store, &cam, WHITE));
    });
    both(c, "splat_loss_backward_200_64px", || {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let r = render_splats(&ctx, &set, &cam, WHITE, Some(&target));
        black_box(tape.backward(r.loss.unwrap()).unwrap());
    });
}

criterion_group!(benches, bench_volume, bench_splats);
criterion_main!(benches);
