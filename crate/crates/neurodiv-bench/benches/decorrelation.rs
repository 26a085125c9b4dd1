//! Diversity-side costs: the decorrelation loss as the stream count grows
//! (all pairs versus a sampled subset), the spectral diversity index, and
//! the Monte Carlo aggregate sampler.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use neurodiv_bench::random_streams;
use neurodiv_core::diversity::{
    decorrelation_loss, full_decorrelation_loss, sample_pairs, stream_diversity, FeatureSet,
    Normalization, STANDARDIZE_EPS, VARIANCE_FLOOR,
};
use neurodiv_core::theory::mc_aggregate;
use neurodiv_core::{Bindings, GraphBuilder, NodeId, SeedTree, Tensor};
use std::collections::BTreeMap;

const N: usize = 512;
const D: usize = 32;

fn feature_graph(p: usize, pairs: Option<&[(usize, usize)]>) -> (neurodiv_core::Graph<f64>, NodeId) {
    let mut gb = GraphBuilder::<f64>::new();
    let feats: Vec<NodeId> = (0..p)
        .map(|s| gb.input(&format!("f{s}"), &[N, D]).unwrap())
        .collect();
    let loss = match pairs {
        Some(pairs) => decorrelation_loss(&mut gb, &feats, pairs, STANDARDIZE_EPS)
            .unwrap()
            .loss,
        None => full_decorrelation_loss(&mut gb, &feats, STANDARDIZE_EPS)
            .unwrap()
            .loss,
    };
    gb.output("loss", loss).unwrap();
    (gb.finish(), loss)
}

fn bench_decorrelation_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("decorrelation");
    for p in [2usize, 4, 8] {
        let streams = random_streams(p, N, D, 7);
        let tensors: Vec<Tensor<f64>> = streams
            .iter()
            .map(|s| Tensor::from_f64s(&[N, D], s).unwrap())
            .collect();
        let bind = |_: ()| -> Bindings<'_, f64> {
            tensors
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("f{i}"), t))
                .collect::<BTreeMap<_, _>>()
        };

        let (full_graph, full_loss) = feature_graph(p, None);
        let bindings = bind(());
        group.bench_with_input(BenchmarkId::new("all_pairs", p), &p, |bencher, _| {
            bencher.iter(|| {
                let eval = full_graph.eval(&bindings).unwrap();
                let grads = full_graph.backward(&eval, full_loss).unwrap();
                black_box(grads)
            });
        });

        if p > 2 {
            let mut rng = SeedTree::new(8).rng_indexed("pairs", p as u64);
            let pairs = sample_pairs(p, p, &mut rng).unwrap();
            let (sub_graph, sub_loss) = feature_graph(p, Some(&pairs));
            group.bench_with_input(BenchmarkId::new("sampled_pairs", p), &p, |bencher, _| {
                bencher.iter(|| {
                    let eval = sub_graph.eval(&bindings).unwrap();
                    let grads = sub_graph.backward(&eval, sub_loss).unwrap();
                    black_box(grads)
                });
            });
        }
    }
    group.finish();
}

fn bench_diversity_index(c: &mut Criterion) {
    let mut group = c.benchmark_group("diversity_index");
    group.sample_size(20);
    for p in [2usize, 4] {
        let set = FeatureSet::new(random_streams(p, 2048, D, 9), 2048, D).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(p), &p, |bencher, _| {
            bencher.iter(|| {
                black_box(
                    stream_diversity(&set, Normalization::Whiten, VARIANCE_FLOOR, 3).unwrap(),
                )
            });
        });
    }
    group.finish();
}

fn bench_mc_aggregate(c: &mut Criterion) {
    let seeds = SeedTree::new(11).child("bench");
    c.bench_function("mc_aggregate_100k", |bencher| {
        bencher.iter(|| black_box(mc_aggregate(1.0, 1.0, 0.3, 4, 100_000, 8, &seeds).unwrap()));
    });
}

criterion_group!(
    benches,
    bench_decorrelation_loss,
    bench_diversity_index,
    bench_mc_aggregate
);
criterion_main!(benches);
