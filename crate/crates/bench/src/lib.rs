//! Benchmarks for the gate and a full training step at the default sizes.

use std::hint::black_box;

use criterion::Criterion;
use probanet::gate::{gate_backward, gate_forward, GateMode, GateParams};
use probanet::rng::XorShift64Star;
use probanet::sim::SimConfig;
use probanet::tensor::{conv1x1_forward, FeatureMap};
use probanet::train::{step_scenes, train_step, TrainConfig, TrainState};

fn random_map(rng: &mut XorShift64Star, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.uniform(-1.0, 1.0))
}

pub fn benchmarks(c: &mut Criterion) {
    let sim = SimConfig::default();
    let config = TrainConfig::default();
    let (h, w) = (sim.height, sim.width);
    let anchors = sim.anchor_grid().channels();

    let mut rng = XorShift64Star::new(1);
    let params = GateParams::init(sim.channels, anchors, config.r, config.th, &mut rng).unwrap();
    let x = random_map(&mut rng, h, w, sim.channels);
    let a = random_map(&mut rng, h, w, anchors);
    let grad_b = random_map(&mut rng, h, w, anchors);

    c.bench_function("conv1x1_forward", |b| {
        b.iter(|| conv1x1_forward(black_box(&x), black_box(&params.reduce)).unwrap())
    });
    c.bench_function("gate_forward", |b| {
        b.iter(|| gate_forward(black_box(&x), black_box(&a), &params, GateMode::Train).unwrap())
    });
    let out = gate_forward(&x, &a, &params, GateMode::Train).unwrap();
    c.bench_function("gate_backward", |b| {
        b.iter(|| gate_backward(black_box(&out), &x, &a, &params, black_box(&grad_b)).unwrap())
    });

    let state = TrainState::new(&sim, &config).unwrap();
    let scenes = step_scenes(&sim, &config, 0).unwrap();
    c.bench_function("train_step", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| train_step(&mut s, black_box(&scenes), &sim, &config).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}
