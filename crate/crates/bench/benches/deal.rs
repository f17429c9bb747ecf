use criterion::{criterion_group, criterion_main, Criterion};
use deal_core::training::training_distances;
use deal_core::{
    auc, average_precision, encode_attributes, loss_and_gradient, sample_minibatch, shortest_path_distances,
    AttributedGraph, HyperParams, ModelParams, SparseRows, SplitRecipe,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cora-sized random graph: 2708 nodes, ~5.3k edges, 1433 sparse attributes.
fn synthetic_graph(rng: &mut ChaCha8Rng) -> AttributedGraph {
    let (n, m, attrs) = (2708, 5300, 1433);
    let edges: Vec<(usize, usize)> = (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect();
    let mut triplets = Vec::new();
    for u in 0..n {
        for _ in 0..18 {
            triplets.push((u, rng.random_range(0..attrs), 1.0));
        }
    }
    triplets.sort_by_key(|t| (t.0, t.1));
    triplets.dedup_by_key(|t| (t.0, t.1));
    let features = SparseRows::from_triplets(n, attrs, triplets).unwrap();
    AttributedGraph::new(n, attrs, edges, features).unwrap().0
}

fn benches(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let graph = synthetic_graph(&mut rng);
    let split = SplitRecipe::Transductive { val_frac: 0.1, test_frac: 0.1 }
        .make(&graph, 1)
        .unwrap();
    let hp = HyperParams::default();
    let dist = training_distances(&graph, &split, 5).unwrap();
    let model = ModelParams::init(graph.num_nodes(), graph.num_attrs(), &[256], 64, 1.0, &mut rng);
    let all_nodes = split.training_nodes(graph.num_nodes());

    c.bench_function("sample_minibatch k=512", |b| {
        b.iter(|| sample_minibatch(&graph, &split, &hp, &dist, &mut rng).unwrap())
    });

    let batch = sample_minibatch(&graph, &split, &hp, &dist, &mut rng).unwrap();
    let mut grads = model.zeros_like();
    c.bench_function("loss_and_gradient k=512", |b| {
        b.iter(|| loss_and_gradient(&model, graph.features(), &batch, &hp, &all_nodes, &mut grads).unwrap())
    });

    c.bench_function("encode_attributes all nodes", |b| {
        b.iter(|| encode_attributes(&model.attr, graph.features()).unwrap())
    });

    let sources: Vec<usize> = (0..graph.num_nodes()).collect();
    c.bench_function("bfs distances d_max=5", |b| {
        b.iter(|| shortest_path_distances(&graph, &sources, 5).unwrap())
    });

    let labels: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.5)).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("auc n=10000", |b| {
        b.iter(|| auc(&labels, &scores).unwrap())
    });
    c.bench_function("average_precision n=10000", |b| {
        b.iter(|| average_precision(&labels, &scores).unwrap())
    });
}

criterion_group! {
    name = deal;
    config = Criterion::default().sample_size(20);
    targets = benches
}
criterion_main!(deal);
