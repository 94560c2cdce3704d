use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mgaze_core::data::{synth_make_dataset, SyntheticSceneConfig};
use mgaze_core::eval::{average_precision, synthetic_experiment_config};
use mgaze_core::model::train_step;
use mgaze_core::nn::{conv2d, conv2d_backward, LayerParams, OptimizerState, Tensor};
use mgaze_core::ModelParams;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = LayerParams::conv2d(16, 8, 3, &mut rng);
    let x = Tensor::new(
        vec![8, 32, 32],
        (0..8 * 32 * 32)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let y = conv2d(&p, &x, 2).unwrap();
    let up = Tensor::filled(y.shape(), 0.1);
    c.bench_function("conv2d_forward_8x32x32_to_16", |b| {
        b.iter(|| conv2d(&p, &x, 2).unwrap())
    });
    c.bench_function("conv2d_backward_8x32x32_to_16", |b| {
        b.iter(|| conv2d_backward(&p, &x, 2, &up).unwrap())
    });
}

fn step(c: &mut Criterion) {
    let cfg = synthetic_experiment_config();
    let batch = synth_make_dataset(&SyntheticSceneConfig::default(), cfg.batch_size, 0.5).unwrap();
    let params = ModelParams::init(1, 0);
    let opt = OptimizerState::new(cfg.rmsprop(), params.tensors()).unwrap();
    c.bench_function("train_step_batch16", |b| {
        b.iter_batched(
            || (params.clone(), opt.clone()),
            |(mut p, mut o)| train_step(&mut p, &mut o, &batch, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn ap(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..=1)).collect();
    c.bench_function("average_precision_10k", |b| {
        b.iter(|| average_precision(&scores, &labels).unwrap())
    });
}

criterion_group!(benches, conv, step, ap);
criterion_main!(benches);
