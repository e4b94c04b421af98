use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use gacn::imgproc::{spatial_frequency, GuidedFilterPlan};
use gacn::Tape;
use gacn_bench::texture;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    g.sample_size(10);
    // the widest dense-extraction layer and the 7x7 attention conv
    for (cin, cout, k) in [(49, 16, 3), (32, 1, 7)] {
        let x = texture(&[1, cin, 128, 128], 1);
        let w = texture(&[cout, cin, k, k], 2).map(|v| v - 0.5);
        let b = texture(&[cout], 3);
        let id = format!("{cin}to{cout}_k{k}");
        g.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let tape = Tape::no_grad();
                let y = tape
                    .constant(x.clone())
                    .conv2d(&tape.constant(w.clone()), &tape.constant(b.clone()));
                black_box(y.unwrap().value().len())
            })
        });
        g.bench_function(BenchmarkId::new("forward_backward", &id), |bench| {
            bench.iter(|| {
                let tape = Tape::new();
                let (xv, wv, bv) = (
                    tape.param(x.clone()),
                    tape.param(w.clone()),
                    tape.param(b.clone()),
                );
                let loss = xv.conv2d(&wv, &bv).unwrap().sum();
                black_box(tape.backward(&loss).unwrap().get_or_zeros(&wv).len())
            })
        });
    }
    g.finish();
}

fn filters(c: &mut Criterion) {
    let mut g = c.benchmark_group("filters");
    let f = texture(&[1, 16, 128, 128], 4);
    g.bench_function("spatial_frequency_16ch_r5", |b| {
        b.iter(|| black_box(spatial_frequency(f.data(), 16, 128, 128, 5)))
    });
    let guide = texture(&[1, 1, 256, 256], 5);
    let p = texture(&[1, 1, 256, 256], 6);
    g.bench_function("guided_filter_256_r4", |b| {
        b.iter(|| black_box(GuidedFilterPlan::new(guide.data(), 256, 256, 4, 0.1).apply(p.data())))
    });
    g.finish();
}

criterion_group!(benches, conv, filters);
criterion_main!(benches);
