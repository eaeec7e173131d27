use cgmsfem::clustering::ClusterPartition;
use cgmsfem::fem::{assemble_load, fine_reference_solve, Source};
use cgmsfem::fields::{generate_logsine_medium, PermeabilityEnsemble};
use cgmsfem::grid::{build_grids, neighborhoods, CoarseGrid, FineGrid};
use cgmsfem::linalg::dot;
use cgmsfem::offline::{build_offline_space, BasisSelection, OfflineConfig, OfflineSpace};
use cgmsfem::online::{
    compute_residual, enrich, solve_online_basis, LocalProblem, OnlineConfig, OnlineScope,
    Selection,
};
use cgmsfem::solver::{
    compute_errors, downscale, energy_sq, solve, solve_ensemble_galerkin, solve_per_realization,
    CoarseAssembler, SolveMode,
};

struct Setup {
    fine: FineGrid,
    ens: PermeabilityEnsemble,
    space: OfflineSpace,
}

/// `labels(i, m)` gives the cluster labels of neighborhood `i`.
fn setup(m: usize, bases: usize, labels: impl Fn(usize, usize) -> Vec<usize>) -> Setup {
    let (fine, cg): (FineGrid, CoarseGrid) = build_grids(20, 20, 4, 4).unwrap();
    let ens = generate_logsine_medium(fine, 8, m).unwrap();
    let nbhds = neighborhoods(&cg);
    let parts: Vec<ClusterPartition> = nbhds
        .iter()
        .map(|n| ClusterPartition::from_labels(n.id, labels(n.id, m), &ens, &n.region).unwrap())
        .collect();
    let cfg = OfflineConfig {
        selection: BasisSelection::Fixed(bases),
        randomized: None,
    };
    let space = build_offline_space(&cg, &nbhds, &parts, &cfg).unwrap();
    Setup { fine, ens, space }
}

fn one_cluster(_: usize, m: usize) -> Vec<usize> {
    vec![0; m]
}

fn singletons(_: usize, m: usize) -> Vec<usize> {
    (0..m).collect()
}

fn energy_error(s: &Setup, w: usize, u_h: &[f64], u: &[f64]) -> f64 {
    let e: Vec<f64> = u_h.iter().zip(u).map(|(a, b)| a - b).collect();
    energy_sq(s.fine, &s.ens.realizations[w], &e).unwrap()
}

#[test]
fn zero_source_gives_zero_solution() {
    let s = setup(3, 2, one_cluster);
    for mode in [SolveMode::PerRealization, SolveMode::Ensemble] {
        let sol = solve(&s.space, &s.ens, &Source::Constant(0.0), mode).unwrap();
        assert!(sol.fields.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn per_realization_solution_is_energy_optimal() {
    let s = setup(3, 3, one_cluster);
    let f = Source::Constant(1.0);
    let u_h = fine_reference_solve(&s.ens, &f).unwrap();
    let sol = solve_per_realization(&s.space, &s.ens, &f).unwrap();
    for w in 0..s.ens.len() {
        let best = energy_error(&s, w, &u_h[w], &sol.fields[w]);
        for (p, scale) in [(0usize, 1e-3), (5, -1e-2), (s.space.dim() - 1, 0.1)] {
            let mut c = sol.coefficients[w].clone();
            c[p] += scale;
            let u = downscale(&s.space, s.fine, &c);
            let perturbed = energy_error(&s, w, &u_h[w], &u);
            assert!(perturbed > best, "ω={w} p={p}: {perturbed} <= {best}");
        }
    }
}

#[test]
fn single_realization_modes_agree() {
    let s = setup(1, 3, one_cluster);
    let f = Source::Constant(1.0);
    let a = solve_per_realization(&s.space, &s.ens, &f).unwrap();
    let b = solve_ensemble_galerkin(&s.space, &s.ens, &f).unwrap();
    for (x, y) in a.coefficients[0].iter().zip(&b.coefficients[0]) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
    }
}

#[test]
fn singleton_clusters_decouple_the_ensemble_system() {
    let s = setup(4, 2, singletons);
    let f = Source::Constant(1.0);
    let a = solve_per_realization(&s.space, &s.ens, &f).unwrap();
    let b = solve_ensemble_galerkin(&s.space, &s.ens, &f).unwrap();
    for w in 0..4 {
        for (x, y) in a.fields[w].iter().zip(&b.fields[w]) {
            assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-3));
        }
    }
}

#[test]
fn coarse_matrix_symmetric_and_downscale_linear() {
    let s = setup(2, 3, one_cluster);
    let asm = CoarseAssembler::new(&s.space, s.fine, &Source::Constant(1.0));
    let cols = s.space.active_columns(1);
    let sys = asm.system(&s.ens.realizations[1], &cols).unwrap();
    let n = cols.len();
    for a in 0..n {
        assert!(sys.matrix[(a, a)] > 0.0);
        for b in 0..n {
            let (x, y) = (sys.matrix[(a, b)], sys.matrix[(b, a)]);
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
    let c1: Vec<f64> = (0..n).map(|k| (k as f64).sin()).collect();
    let c2: Vec<f64> = (0..n).map(|k| (k as f64 * 0.3).cos()).collect();
    let sum: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| 2.0 * a - b).collect();
    let (u1, u2, us) = (asm.downscale(&c1), asm.downscale(&c2), asm.downscale(&sum));
    for k in 0..us.len() {
        assert!((2.0 * u1[k] - u2[k] - us[k]).abs() < 1e-12);
    }
}

#[test]
fn residual_vanishes_for_exact_solution_and_equals_load_at_zero() {
    let s = setup(2, 1, one_cluster);
    let f = Source::Constant(1.0);
    let u_h = fine_reference_solve(&s.ens, &f).unwrap();
    let load = assemble_load(&s.fine.whole(), &f);
    let lmax = load.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in [0, 4, 8] {
        let exact = compute_residual(&s.space, i, 1, &u_h[1], &s.ens, &f).unwrap();
        assert!(exact.norm <= 1e-9 * lmax, "residual {}", exact.norm);
        let zero =
            compute_residual(&s.space, i, 1, &vec![0.0; s.fine.num_nodes()], &s.ens, &f).unwrap();
        let region = s.space.regions[i];
        for (v, &l) in zero.values.iter().zip(&zero.interior) {
            assert!((v - load[region.global_node(l)]).abs() < 1e-15);
        }
    }
}

#[test]
fn residual_is_affine_and_riesz_energy_positive() {
    let s = setup(2, 1, one_cluster);
    let f = Source::Constant(1.0);
    let sol = solve_per_realization(&s.space, &s.ens, &f).unwrap();
    let load = assemble_load(&s.fine.whole(), &f);
    let problem = LocalProblem::new(s.space.regions[5], &s.ens.realizations[0]).unwrap();
    let zero = vec![0.0; s.fine.num_nodes()];
    let r0 = problem.residual(&zero, &load);
    let r1 = problem.residual(&sol.fields[0], &load);
    let double: Vec<f64> = sol.fields[0].iter().map(|v| 2.0 * v).collect();
    let r2 = problem.residual(&double, &load);
    for k in 0..r0.len() {
        // r(2u) = 2 r(u) - r(0)
        assert!((r2[k] - (2.0 * r1[k] - r0[k])).abs() < 1e-10);
    }
    let phi = problem.riesz(&r1).unwrap();
    let restricted: Vec<f64> = problem.interior().iter().map(|&l| phi[l]).collect();
    let a_phi_phi = problem.matrix_energy(&phi);
    let r_phi = dot(&r1, &restricted);
    assert!(r_phi > 0.0);
    assert!((a_phi_phi - r_phi).abs() <= 1e-8 * r_phi);
}

#[test]
fn zero_residual_yields_no_basis() {
    let s = setup(2, 1, one_cluster);
    let zero = vec![0.0; s.fine.num_nodes()];
    let rec = compute_residual(&s.space, 3, 0, &zero, &s.ens, &Source::Constant(0.0)).unwrap();
    assert!(solve_online_basis(&rec, &s.space, &s.ens, 1)
        .unwrap()
        .is_none());
}

#[test]
fn enrichment_decreases_energy_error() {
    let s = setup(3, 1, one_cluster);
    let f = Source::Constant(1.0);
    let u_h = fine_reference_solve(&s.ens, &f).unwrap();
    let sol = solve_per_realization(&s.space, &s.ens, &f).unwrap();
    let before: Vec<f64> = (0..3)
        .map(|w| energy_error(&s, w, &u_h[w], &sol.fields[w]))
        .collect();
    let cfg = OnlineConfig {
        rounds: 1,
        selection: Selection::TopFraction(1.0),
        scope: OnlineScope::Realization,
        ..Default::default()
    };
    let out = enrich(
        &s.space,
        sol,
        &s.ens,
        &u_h,
        &f,
        SolveMode::PerRealization,
        &[0, 1, 2],
        &cfg,
    )
    .unwrap();
    assert!(out.trace[1].added > 0);
    assert!(out.trace[1].dofs > out.trace[0].dofs);
    for w in 0..3 {
        let after = energy_error(&s, w, &u_h[w], &out.solution.fields[w]);
        assert!(after < before[w], "ω={w}: {after} >= {}", before[w]);
    }
    assert!(out.trace[1].errors.rel_e1_s < out.trace[0].errors.rel_e1_s);
}

#[test]
fn zero_residuals_leave_the_trace_flat() {
    let s = setup(2, 1, one_cluster);
    let f = Source::Constant(0.0);
    let u_h = fine_reference_solve(&s.ens, &f).unwrap();
    let sol = solve_per_realization(&s.space, &s.ens, &f).unwrap();
    let out = enrich(
        &s.space,
        sol,
        &s.ens,
        &u_h,
        &f,
        SolveMode::PerRealization,
        &[0, 1],
        &OnlineConfig::default(),
    )
    .unwrap();
    assert_eq!(out.trace.len(), 4);
    for t in &out.trace {
        assert_eq!(t.added, 0);
        assert_eq!(t.dofs, s.space.dim());
        assert_eq!(t.errors, out.trace[0].errors);
    }
    let errs = compute_errors(&u_h, &out.solution.fields, &s.ens, &[0, 1]).unwrap();
    assert_eq!(errs.e1_s, 0.0);
}
