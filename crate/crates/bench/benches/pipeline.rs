use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gacn::datagen::TrainingSample;
use gacn::stack::{calibrated_fuse, serial_fuse};
use gacn::trainer::{sample_gradients, TrainConfig};
use gacn::{FusionConfig, FusionNet, Tensor};
use gacn_bench::{focal_stack, texture};

fn two_image(c: &mut Criterion) {
    let net = FusionNet::init(FusionConfig::default(), 1).unwrap();
    let (a, b) = (texture(&[1, 1, 128, 128], 1), texture(&[1, 1, 128, 128], 2));
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("fuse_128", |bench| {
        bench.iter(|| black_box(net.fuse_gray(&a, &b).unwrap().0))
    });

    let cfg = TrainConfig::desk();
    let weights = cfg.net.init_weights(2);
    let sample = TrainingSample {
        near: a.clone(),
        far: b.clone(),
        mask: Tensor::from_fn([1, 1, 128, 128], |i| ((i % 128) < 64) as u8 as f64),
        fused: a.clone(),
    };
    g.bench_function("train_sample_128", |bench| {
        bench.iter(|| black_box(sample_gradients(&weights, &sample, &cfg).unwrap().0))
    });
    g.finish();
}

fn stacks(c: &mut Criterion) {
    let net = FusionNet::init(FusionConfig::default(), 1).unwrap();
    let stack = focal_stack(5, 128);
    let mut g = c.benchmark_group("stack_n5_128");
    g.sample_size(10);
    g.bench_function("serial", |b| {
        b.iter(|| black_box(serial_fuse(&stack, &net).unwrap().0))
    });
    g.bench_function("calibrated", |b| {
        b.iter(|| black_box(calibrated_fuse(&stack, &net).unwrap().fused))
    });
    g.finish();
}

criterion_group!(benches, two_image, stacks);
criterion_main!(benches);
