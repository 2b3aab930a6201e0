use criterion::{criterion_group, criterion_main, Criterion};
use rgf_bench::fixture;
use rgf_core::mcts::{run_search, NetModel, SearchConfig};
use rgf_core::metrics::{combined_score, MetricConfig};
use rgf_core::nets::{dynamics, embed_scene, represent};
use rgf_core::skeleton::{mask_to_graph, skeletonize};
use std::hint::black_box;

fn bench_scoring(c: &mut Criterion) {
    let fx = fixture();
    let cfg = MetricConfig::default();
    let pred = fx.scene.gt.subdivide_edges(25.0).unwrap();
    c.bench_function("combined_score", |b| {
        b.iter(|| combined_score(black_box(&fx.scene.gt), black_box(&pred), &cfg).unwrap())
    });
}

fn bench_skeleton(c: &mut Criterion) {
    let fx = fixture();
    let mask = &fx.scene.road_mask;
    c.bench_function("skeletonize_300px", |b| b.iter(|| skeletonize(black_box(mask))));
    let skel = skeletonize(mask);
    c.bench_function("mask_to_graph", |b| b.iter(|| mask_to_graph(black_box(&skel))));
}

fn bench_net(c: &mut Criterion) {
    let fx = fixture();
    let emb = embed_scene(&fx.tensor, &fx.params);
    let tokens: Vec<u32> = fx.gt_edges.iter().take(8).flat_map(|&(a, b)| [a, b]).collect();
    c.bench_function("represent_16_tokens", |b| {
        b.iter(|| represent(black_box(&tokens), &emb, &fx.params).unwrap())
    });
    let latent = represent(&tokens, &emb, &fx.params).unwrap();
    c.bench_function("dynamics_step", |b| {
        b.iter(|| dynamics(black_box(&latent), 0, &fx.tensor, &emb, &fx.params))
    });
}

fn bench_search(c: &mut Criterion) {
    let fx = fixture();
    let n_max = (4 * fx.keypoints.len()).min(256);
    let model = NetModel::new(&fx.params, &fx.tensor, n_max);
    let cfg = SearchConfig { n_simulations: 50, ..SearchConfig::default() };
    c.bench_function("search_50_sims", |b| {
        b.iter(|| run_search(black_box(&model), &[], &cfg, 3).unwrap())
    });
}

criterion_group!(benches, bench_scoring, bench_skeleton, bench_net, bench_search);
criterion_main!(benches);
