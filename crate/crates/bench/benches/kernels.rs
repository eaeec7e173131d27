use cgmsfem::clustering::{kmeans, FeatureTable, KMeansOptions};
use cgmsfem::fem::{assemble_stiffness, fine_solve, Source};
use cgmsfem::grid::Hat;
use cgmsfem::localreduce::{reduce_neighborhood, LocalReduceConfig};
use cgmsfem::offline::{build_snapshot_space, spectral_decompose, BasisSelection};
use cgmsfem::solver::{solve_ensemble_galerkin, solve_per_realization};
use cgmsfem_bench::fixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn fine(c: &mut Criterion) {
    let fx = fixture(64, 8, 1, 1, 1);
    let kappa = &fx.ensemble.realizations[0];
    let mut g = c.benchmark_group("fine");
    g.bench_function("assemble_64", |b| {
        b.iter(|| assemble_stiffness(&fx.fine.whole(), black_box(kappa)).unwrap())
    });
    g.sample_size(10);
    g.bench_function("solve_64", |b| {
        b.iter(|| fine_solve(&fx.fine, black_box(kappa), &Source::Constant(1.0)).unwrap())
    });
    g.finish();
}

fn offline(c: &mut Criterion) {
    let fx = fixture(60, 6, 4, 1, 3);
    let nb = &fx.neighborhoods[12];
    let kappa_bar = &fx.partitions[12].mean_fields[0];
    let mut g = c.benchmark_group("offline");
    g.sample_size(10);
    g.bench_function("snapshots_and_spectral", |b| {
        b.iter(|| {
            let snap = build_snapshot_space(nb, 0, kappa_bar).unwrap();
            let hat = Hat::new(&fx.coarse, nb.id);
            let chi: Vec<f64> = (0..nb.region.num_nodes())
                .map(|l| {
                    let (x, y) = nb.region.node_coords(l);
                    hat.value(x, y)
                })
                .collect();
            spectral_decompose(&snap, &hat, &chi, BasisSelection::Fixed(5)).unwrap()
        })
    });
    g.finish();
}

fn local_reduction(c: &mut Criterion) {
    let fx = fixture(40, 4, 20, 1, 1);
    let nb = &fx.neighborhoods[4];
    let cfg = LocalReduceConfig {
        eps: 1e-2,
        ..Default::default()
    };
    let mut g = c.benchmark_group("localreduce");
    g.sample_size(10);
    g.bench_function("reduce_neighborhood_m20", |b| {
        b.iter(|| reduce_neighborhood(nb, &fx.ensemble, &cfg, &Source::Constant(1.0)).unwrap())
    });
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            (0..64)
                .map(|d| ((i * 31 + d * 7) as f64 * 0.013).sin() * (1 + i % 5) as f64)
                .collect()
        })
        .collect();
    let table = FeatureTable {
        neighborhood: 0,
        rows,
    };
    let mut g = c.benchmark_group("kmeans");
    for j in [5usize, 10] {
        g.bench_with_input(BenchmarkId::new("n200_d64", j), &j, |b, &j| {
            b.iter(|| kmeans(&table, j, 3, KMeansOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn coarse(c: &mut Criterion) {
    let fx = fixture(50, 5, 8, 2, 3);
    let f = Source::Constant(1.0);
    let mut g = c.benchmark_group("coarse");
    g.sample_size(10);
    g.bench_function("per_realization_m8", |b| {
        b.iter(|| solve_per_realization(&fx.space, &fx.ensemble, &f).unwrap())
    });
    g.bench_function("ensemble_m8", |b| {
        b.iter(|| solve_ensemble_galerkin(&fx.space, &fx.ensemble, &f).unwrap())
    });
    g.finish();
}

criterion_group!(benches, fine, offline, local_reduction, clustering, coarse);
criterion_main!(benches);
