use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mpt_core::bernoulli::{dataset_masked_loss_grad, BernoulliConditional, BernoulliLinearParams, QuadratureGrid};
use mpt_core::masking::{percent_grid, sample_mask};
use mpt_core::par;
use mpt_core::ppca::{sample_dataset, PpcaParams};
use mpt_core::rng::RngKey;
use mpt_core::scoring::{mpt_curve, MaskBudget};
use mpt_core::training::{train, TrainConfig};

fn curve(c: &mut Criterion) {
    let p = PpcaParams::random(20, 2, 1.0, 0.5, -0.5, RngKey::new(1)).unwrap();
    let data = sample_dataset(&p, 200, 2).unwrap();
    let sizes = percent_grid(20);
    let mut g = c.benchmark_group("mpt_curve_d20_n200_p10");
    g.sample_size(10);
    let run = || mpt_curve(&p, &data, &sizes, MaskBudget::Sampled(10), RngKey::new(3)).unwrap();
    g.bench_function("parallel", |b| b.iter(|| black_box(run())));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::sequential(run))));
    g.finish();
}

fn training_epochs(c: &mut Criterion) {
    let p = PpcaParams::random(10, 2, 1.0, 0.5, -0.5, RngKey::new(4)).unwrap();
    let data = sample_dataset(&p, 500, 5).unwrap();
    let init = PpcaParams::random_init(10, 2, RngKey::new(6)).unwrap();
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let mut g = c.benchmark_group("ppca_train_5_epochs_n500");
    g.sample_size(10);
    let run = || train(&init, &data, &cfg).unwrap();
    g.bench_function("parallel", |b| b.iter(|| black_box(run())));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::sequential(run))));
    g.finish();
}

fn quadrature(c: &mut Criterion) {
    let p = BernoulliLinearParams::random(16, 1.0, 0.0, RngKey::new(7)).unwrap();
    let data = p.sample(256, 8);
    let grid = QuadratureGrid::default();
    let mut rng = RngKey::new(9).rng();
    let masks: Vec<_> = (0..256).map(|_| vec![sample_mask(16, 5, &mut rng).unwrap()]).collect();
    let mut g = c.benchmark_group("bernoulli_block_grad_n256");
    g.sample_size(10);
    let run = || dataset_masked_loss_grad(&p, &data, &masks, &grid, BernoulliConditional::Block).unwrap();
    g.bench_function("parallel", |b| b.iter(|| black_box(run())));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::sequential(run))));
    g.finish();
}

criterion_group!(benches, curve, training_epochs, quadrature);
criterion_main!(benches);
