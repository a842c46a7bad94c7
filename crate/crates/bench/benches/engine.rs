//! Throughput of the hot paths: matrix multiply, the network passes, one
//! full optimizer step, and augmentation draws.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use lunar_cnn::augment::draw_augmented;
use lunar_cnn::layers::{network_backward, network_forward};
use lunar_cnn::optim::{adam_step, cross_entropy};
use lunar_cnn::rng::stream_rng;
use lunar_cnn::tensor::matmul;
use lunar_cnn::{AdamHyper, AdamState, AugmentConfig, NetworkConfig, NetworkParams};
use lunar_cnn_bench::{rand_image, rand_tensor};

fn bench_gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for &(m, k, n) in &[(256, 256, 256), (180, 1024, 128)] {
        let a = rand_tensor(&[m, k], 1);
        let b = rand_tensor(&[k, n], 2);
        g.throughput(Throughput::Elements((2 * m * k * n) as u64));
        g.bench_function(format!("{m}x{k}x{n}"), |bch| {
            bch.iter(|| matmul(&a, &b).unwrap())
        });
    }
    g.finish();
}

fn bench_network(c: &mut Criterion) {
    let cfg = NetworkConfig::default();
    let mut init_rng = stream_rng(7, 0);
    let params = NetworkParams::init(&cfg, &mut init_rng).unwrap();
    let batch = 32;
    let input = rand_tensor(&[batch, 1, cfg.input, cfg.input], 3);
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.classes).collect();

    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    g.throughput(Throughput::Elements(batch as u64));
    g.bench_function("forward_eval_b32", |b| {
        b.iter(|| network_forward(&params, &cfg, input.clone(), None).unwrap())
    });
    g.bench_function("train_step_b32", |b| {
        b.iter_batched(
            || {
                (
                    params.clone(),
                    AdamState::new(&cfg).unwrap(),
                    stream_rng(7, 2),
                )
            },
            |(mut p, mut state, mut drop_rng)| {
                let (probs, cache) =
                    network_forward(&p, &cfg, input.clone(), Some(&mut drop_rng)).unwrap();
                let loss = cross_entropy(&probs, &labels).unwrap();
                let grads = network_backward(&p, &cfg, &cache, &probs, &labels).unwrap();
                adam_step(&mut p, &grads, &mut state, &AdamHyper::default()).unwrap();
                loss
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn bench_augment(c: &mut Criterion) {
    let img = rand_image(50, 5);
    let cfg = AugmentConfig::default();
    let mut rng = stream_rng(11, 4);
    c.bench_function("augment_draw_50px", |b| {
        b.iter(|| draw_augmented(&img, &cfg, &mut rng).unwrap())
    });
}

criterion_group!(benches, bench_gemm, bench_network, bench_augment);
criterion_main!(benches);
