use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layersep::perf::{assign_nodes, Mode};
use layersep_bench::{alexnet_constants, allreduce_once, conv_case};

fn conv_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv_forward");
    for batch in [1usize, 4, 16] {
        let (layer, x) = conv_case(batch);
        g.bench_with_input(BenchmarkId::from_parameter(batch), &x, |b, x| {
            b.iter(|| layer.forward(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn allreduce(c: &mut Criterion) {
    let mut g = c.benchmark_group("allreduce_4096");
    g.sample_size(20);
    for n in [2usize, 5, 8, 16] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| b.iter(|| allreduce_once(n, 4096)));
    }
    g.finish();
}

fn planner(c: &mut Criterion) {
    let k = alexnet_constants();
    c.bench_function("assign_nodes_128", |b| {
        b.iter(|| assign_nodes(black_box(&k), 128, Mode::Stanza, None).unwrap())
    });
}

criterion_group!(benches, conv_forward, allreduce, planner);
criterion_main!(benches);
