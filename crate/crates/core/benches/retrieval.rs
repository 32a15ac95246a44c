use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mggraph::embedding::{normalize, EmbeddingMatrix, Level};
use mggraph::retrieval::{propagate_with, RetrievalConfig, SeedDistribution, TransitionMatrix};
use mggraph::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn random_graph(n: usize, avg_degree: usize, rng: &mut ChaCha8Rng) -> TransitionMatrix {
    let edges: Vec<(usize, usize, f64)> = (0..n * avg_degree / 2)
        .map(|_| {
            let w = if rng.random_bool(0.2) {
                rng.random_range(0.5..1.0)
            } else {
                1.0
            };
            (rng.random_range(0..n), rng.random_range(0..n), w)
        })
        .collect();
    TransitionMatrix::from_undirected(n, &edges)
}

fn bench_propagation(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut group = c.benchmark_group("propagate");
    group.sample_size(10);
    for n in [10_000, 100_000] {
        let w = random_graph(n, 8, &mut rng);
        let mut seed = vec![0.0; n];
        for _ in 0..50 {
            seed[rng.random_range(0..n)] += 1.0;
        }
        let total: f64 = seed.iter().sum();
        let r0 = SeedDistribution {
            scores: seed.iter().map(|x| x / total).collect(),
        };
        let config = RetrievalConfig::default();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| propagate_with(exec, &r0, &w, &config, |_, _| {}).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_similarities(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 256;
    let mut group = c.benchmark_group("similarities");
    for rows in [5_000, 50_000] {
        let data: Vec<Vec<f32>> = (0..rows)
            .map(|i| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                normalize(&i.to_string(), &v).unwrap()
            })
            .collect();
        let ids = (0..rows).map(|i| format!("s{i}")).collect();
        let m = EmbeddingMatrix::from_rows(Level::Sentence, dim, data, ids).unwrap();
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = normalize("q", &q).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, rows), &rows, |b, _| {
                b.iter(|| m.similarities_with(exec, &q).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_propagation, bench_similarities);
criterion_main!(benches);
