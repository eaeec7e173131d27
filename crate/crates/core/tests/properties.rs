use cgmsfem::clustering::{kmeans, objective, ClusterPartition, FeatureTable, KMeansOptions};
use cgmsfem::fem::{assemble_stiffness, assemble_unit_mass, Source};
use cgmsfem::fields::{generate_logsine_medium, PermeabilityEnsemble};
use cgmsfem::grid::{
    build_grids, neighborhood, neighborhoods, oversample, partition_of_unity, FineGrid,
};
use cgmsfem::localreduce::{kl_expand, LocalSnapshotSet};
use cgmsfem::offline::{build_offline_space, BasisSelection, OfflineConfig};
use cgmsfem::solver::{compute_errors, solve_per_realization};
use proptest::prelude::*;

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..4).prop_flat_map(|dim| {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), 4..24)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_distance_is_a_metric(rows in rows_strategy()) {
        let t = FeatureTable { neighborhood: 0, rows };
        let n = t.len();
        for a in 0..n {
            prop_assert_eq!(t.distance(a, a), 0.0);
            for b in 0..n {
                let d = t.distance(a, b);
                prop_assert!(d >= 0.0);
                prop_assert_eq!(d, t.distance(b, a));
                for c in 0..n {
                    prop_assert!(d <= t.distance(a, c) + t.distance(c, b) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn lloyd_objective_never_increases(rows in rows_strategy(), j in 1usize..4, seed in any::<u64>()) {
        let t = FeatureTable { neighborhood: 3, rows };
        let res = kmeans(&t, j.min(t.len()), seed, KMeansOptions::default()).unwrap();
        for w in res.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
        let fresh = objective(&t.rows, &res.labels);
        prop_assert!((fresh - res.objective).abs() <= 1e-9 * fresh.max(1.0));
        // every label is used
        for c in 0..res.clusters {
            prop_assert!(res.labels.contains(&c));
        }
    }

    #[test]
    fn kl_modes_orthonormal_with_energy_compliance(
        coeffs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 3..8),
        tol in 0.5f64..0.999,
    ) {
        let (_, cg) = build_grids(12, 12, 3, 3).unwrap();
        let over = oversample(&neighborhood(&cg, 0).unwrap(), 1);
        let region = over.region;
        let shapes = |q: usize, x: f64, y: f64| match q {
            0 => (3.0 * x).sin(),
            1 => x * y,
            2 => (5.0 * y).cos(),
            _ => (x - y).powi(3),
        };
        let snapshots = coeffs
            .iter()
            .map(|c| {
                (0..2)
                    .map(|j| {
                        (0..region.num_nodes())
                            .map(|l| {
                                let (x, y) = region.node_coords(l);
                                j as f64 * y + (0..4).map(|q| c[q] * shapes((q + j) % 4, x, y)).sum::<f64>()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let set = LocalSnapshotSet {
            neighborhood: 0,
            subset: (0..coeffs.len()).collect(),
            boundary: vec![vec![]; 2],
            snapshots,
        };
        let mass = assemble_unit_mass(&region);
        let kl = kl_expand(&set, &mass, tol).unwrap();
        for a in 0..kl.num_modes() {
            for b in 0..kl.num_modes() {
                let g = mass.bilinear(&kl.modes[a], &kl.modes[b]);
                let target = if a == b { 1.0 } else { 0.0 };
                prop_assert!((g - target).abs() <= 1e-10, "gram[{}][{}] = {}", a, b, g);
            }
        }
        prop_assert!(kl.energies.windows(2).all(|w| w[0] >= w[1]));
        if kl.num_modes() > 0 {
            prop_assert!(kl.retained_fraction() >= tol);
        }
    }

    #[test]
    fn error_metrics_obey_jensen(
        raw_w in prop::collection::vec(0.1f64..1.0, 2..6),
        amp in prop::collection::vec(-3.0f64..3.0, 6),
        subset_len in 1usize..6,
    ) {
        let grid = FineGrid::new(6, 6).unwrap();
        let m = raw_w.len();
        let total: f64 = raw_w.iter().sum();
        let weights: Vec<f64> = raw_w.iter().map(|w| w / total).collect();
        let ens = PermeabilityEnsemble::with_weights(grid, vec![vec![1.0; grid.num_cells()]; m], weights).unwrap();
        let u_h: Vec<Vec<f64>> = (0..m)
            .map(|w| (0..grid.num_nodes()).map(|n| amp[w] * (n as f64 * 0.37 + w as f64).sin()).collect())
            .collect();
        let u_ms: Vec<Vec<f64>> = (0..m)
            .map(|w| (0..grid.num_nodes()).map(|n| amp[(w + 1) % 6] * (n as f64 * 0.11).cos()).collect())
            .collect();
        let subset: Vec<usize> = (0..subset_len.min(m)).collect();
        let e = compute_errors(&u_h, &u_ms, &ens, &subset).unwrap();
        let slack = 1e-12;
        prop_assert!(e.e2_omega <= e.e1_omega * (1.0 + slack));
        prop_assert!(e.e2_s <= (subset.len() as f64).sqrt() * e.e1_s * (1.0 + slack));
        prop_assert!(e.e1_omega >= 0.0 && e.e2_omega >= 0.0 && e.e1_s >= 0.0 && e.e2_s >= 0.0);
    }

    #[test]
    fn stiffness_is_linear_in_the_coefficient(
        a in prop::collection::vec(0.1f64..5.0, 16),
        b in prop::collection::vec(0.1f64..5.0, 16),
        s in 0.1f64..3.0,
    ) {
        let region = FineGrid::new(4, 4).unwrap().whole();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + y).collect();
        let (ka, kb, kc) = (
            assemble_stiffness(&region, &a).unwrap(),
            assemble_stiffness(&region, &b).unwrap(),
            assemble_stiffness(&region, &combo).unwrap(),
        );
        let v: Vec<f64> = (0..region.num_nodes()).map(|n| (n as f64).sin()).collect();
        let (ya, yb, yc) = (ka.mul_vec(&v), kb.mul_vec(&v), kc.mul_vec(&v));
        for k in 0..v.len() {
            prop_assert!((s * ya[k] + yb[k] - yc[k]).abs() <= 1e-12 * (1.0 + yc[k].abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn relabeling_clusters_changes_nothing_downstream(
        raw in prop::collection::vec(0usize..3, 6),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let mut labels = raw;
        labels[..3].copy_from_slice(&[0, 1, 2]);
        let permuted: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let (fine, cg) = build_grids(12, 12, 3, 3).unwrap();
        let ens = generate_logsine_medium(fine, 4, 6).unwrap();
        let nbhds = neighborhoods(&cg);
        let build = |lab: &Vec<usize>| -> Vec<ClusterPartition> {
            nbhds
                .iter()
                .map(|n| ClusterPartition::from_labels(n.id, lab.clone(), &ens, &n.region).unwrap())
                .collect()
        };
        let (p1, p2) = (build(&labels), build(&permuted));
        for (a, b) in p1.iter().zip(&p2) {
            for j in 0..3 {
                prop_assert_eq!(&a.mean_fields[j], &b.mean_fields[perm[j]]);
            }
        }
        let cfg = OfflineConfig { selection: BasisSelection::Fixed(2), randomized: None };
        let s1 = build_offline_space(&cg, &nbhds, &p1, &cfg).unwrap();
        let s2 = build_offline_space(&cg, &nbhds, &p2, &cfg).unwrap();
        let f = Source::Constant(1.0);
        let (u1, u2) = (solve_per_realization(&s1, &ens, &f).unwrap(), solve_per_realization(&s2, &ens, &f).unwrap());
        for (x, y) in u1.fields.iter().flatten().zip(u2.fields.iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-6));
        }
    }
}

#[test]
fn hats_sum_to_one_away_from_the_boundary() {
    let (fine, cg) = build_grids(30, 30, 5, 5).unwrap();
    let mut total = vec![0.0; fine.num_nodes()];
    for i in 0..cg.num_interior() {
        let region = neighborhood(&cg, i).unwrap().region;
        for (l, v) in partition_of_unity(&cg, i).unwrap().into_iter().enumerate() {
            total[region.global_node(l)] += v;
        }
    }
    for (n, t) in total.iter().enumerate() {
        let (x, y) = fine.node_coords(n);
        if x.min(y).min(1.0 - x).min(1.0 - y) >= 0.2 - 1e-12 {
            assert!((t - 1.0).abs() <= 1e-14, "node {n}: {t}");
        }
    }
}

#[test]
fn singleton_cluster_means_are_the_realizations() {
    let (fine, cg) = build_grids(12, 12, 3, 3).unwrap();
    let ens = generate_logsine_medium(fine, 5, 4).unwrap();
    let nb = neighborhood(&cg, 2).unwrap();
    let p = ClusterPartition::from_labels(2, vec![0, 1, 2, 3], &ens, &nb.region).unwrap();
    for w in 0..4 {
        assert_eq!(
            p.mean_fields[w],
            nb.region.restrict_cells(&ens.realizations[w])
        );
    }
}
