use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use servo_bench::fixture;
use servo_core::control::{ibvs_velocity, teacher_velocity, IbvsConfig};
use servo_core::geometry::{integrate_twist, CameraIntrinsics};
use servo_core::graph::build_graph;
use servo_core::nn::{FusionMode, ModelConfig, ServoNet};
use servo_core::observation::{observe, DepthProvider};
use servo_core::visibility::HprParams;

fn observation(c: &mut Criterion) {
    let f = fixture(1);
    let intr = CameraIntrinsics::default();
    c.bench_function("observe (project + HPR + normalize)", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        b.iter(|| observe(black_box(&f.scene), &f.current, &intr, &HprParams::default(), &DepthProvider::true_depth(), &mut rng))
    });
    c.bench_function("build_graph", |b| b.iter(|| build_graph(black_box(&f.pair)).unwrap()));
}

fn controllers(c: &mut Criterion) {
    let f = fixture(3);
    let intr = CameraIntrinsics::default();
    c.bench_function("teacher step", |b| {
        b.iter(|| integrate_twist(&f.current, &teacher_velocity(black_box(&f.current), &f.target, 2.5), 0.04))
    });
    c.bench_function("ibvs step", |b| b.iter(|| ibvs_velocity(black_box(&f.pair), &intr, &IbvsConfig::default()).unwrap()));
    let graph = build_graph(&f.pair).unwrap();
    let mut group = c.benchmark_group("servonet step");
    for mode in FusionMode::ALL {
        let net = ServoNet::new(ModelConfig { fusion: mode, ..Default::default() }, 4).unwrap();
        let hidden = net.zero_hidden();
        group.bench_function(mode.to_string(), |b| b.iter(|| net.step(black_box(&graph), &hidden).unwrap()));
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = observation, controllers
}
criterion_main!(benches);
