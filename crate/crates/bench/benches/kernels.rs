use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lowdose::dosesim::{generate_dataset, DatasetPlan, Split};
use lowdose::metrics::ssim3d;
use lowdose::nets::NetConfig;
use lowdose::tensor::{Graph, Rng};
use lowdose::trainer::{train_step, TrainConfig, TrainState};
use lowdose::Tensor;

fn conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x: Tensor = Tensor::uniform(vec![4, 16, 32, 32, 32], -1.0, 1.0, &mut rng);
    let w: Tensor = Tensor::uniform(vec![16, 16, 3, 3, 3], -1.0, 1.0, &mut rng);
    let b: Tensor = Tensor::zeros(vec![16]);
    for (name, stride) in [("conv3d 16->16 32^3 s1", 1), ("conv3d 16->16 32^3 s2", 2)] {
        c.bench_function(&format!("{name} forward"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
                let y = g.conv3d(xv, wv, bv, stride, 1).unwrap();
                black_box(g.value(y).len())
            })
        });
        c.bench_function(&format!("{name} forward+backward"), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
                let y = g.conv3d(xv, wv, bv, stride, 1).unwrap();
                let l = g.mean_sq(y).unwrap();
                g.backward(l).unwrap();
                black_box(g.grad(wv).unwrap().len())
            })
        });
    }
}

fn step(c: &mut Criterion) {
    let plan = DatasetPlan {
        train: 4,
        val: 1,
        test: 1,
        ..DatasetPlan::default()
    };
    let data = generate_dataset(&plan).unwrap();
    let batch: Vec<_> = data
        .manifest
        .split(Split::Train)
        .iter()
        .zip(plan.drfs.iter().cycle())
        .map(|(&v, &d)| data.normalized_pair(v, d).unwrap())
        .collect();
    let mut state = TrainState::new(NetConfig::default(), TrainConfig::default()).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step batch 4 at 32^3", |bench| {
        bench.iter(|| black_box(train_step(&mut state, &batch).unwrap()))
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let gt: Tensor = Tensor::uniform(vec![1, 1, 32, 32, 32], 0.0, 1.0, &mut rng);
    let pred: Tensor = Tensor::uniform(vec![1, 1, 32, 32, 32], 0.0, 1.0, &mut rng);
    c.bench_function("ssim3d 32^3", |bench| bench.iter(|| black_box(ssim3d(&pred, &gt, None).unwrap())));
}

criterion_group!(benches, conv, step, metrics);
criterion_main!(benches);
