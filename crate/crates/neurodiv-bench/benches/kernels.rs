//! Core compute kernels: dense matmul through the graph, and one full
//! forward/backward step of the stream language model.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use neurodiv_bench::StepFixture;
use neurodiv_core::{Bindings, GraphBuilder, SeedTree, Tensor};
use std::collections::BTreeMap;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for size in [32usize, 64, 128] {
        let mut gb = GraphBuilder::<f64>::new();
        let a = gb.input("a", &[size, size]).unwrap();
        let b = gb.input("b", &[size, size]).unwrap();
        let prod = gb.matmul(a, b).unwrap();
        gb.output("prod", prod).unwrap();
        let graph = gb.finish();

        let mut rng = SeedTree::new(1).rng("matmul");
        let at = Tensor::<f64>::randn(&[size, size], 0.0, 1.0, &mut rng);
        let bt = Tensor::<f64>::randn(&[size, size], 0.0, 1.0, &mut rng);
        let bindings: Bindings<'_, f64> =
            BTreeMap::from([("a".to_string(), &at), ("b".to_string(), &bt)]);

        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |bencher, _| {
            bencher.iter(|| black_box(graph.eval(&bindings).unwrap()));
        });
    }
    group.finish();
}

fn bench_lm_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("lm_step");
    group.sample_size(20);
    for streams in [1usize, 2, 4] {
        let fixture = StepFixture::new(streams, 4, 32);
        let bindings = fixture.bindings();
        group.bench_with_input(
            BenchmarkId::new("forward", streams),
            &streams,
            |bencher, _| {
                bencher.iter(|| black_box(fixture.graph.eval(&bindings).unwrap()));
            },
        );
        group.bench_with_input(
            BenchmarkId::new("forward_backward", streams),
            &streams,
            |bencher, _| {
                bencher.iter(|| {
                    let eval = fixture.graph.eval(&bindings).unwrap();
                    black_box(fixture.graph.backward(&eval, fixture.loss).unwrap())
                });
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_lm_step);
criterion_main!(benches);
