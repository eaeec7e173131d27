//! Per-neighborhood reduction used to measure distances between realizations.
//!
//! For a coarse neighborhood `D_i` we solve local problems on the oversampled
//! block `D_i^+` with Gaussian random boundary data for a few realizations,
//! certify the number of boundary samples with the randomized range-finder
//! posterior test, compress the snapshots with a Karhunen–Loève expansion, and
//! then solve a tiny Galerkin problem per realization in the span of the KL
//! modes. The reduced coefficients are the clustering features.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_load, assemble_stiffness, assemble_unit_mass, DirichletSolver, Source};
use crate::fields::PermeabilityEnsemble;
use crate::grid::{Neighborhood, OversampledNeighborhood, Region};
use crate::linalg::{dot, CsrMatrix};
use crate::rng;

/// Domain on which the per-realization reduced problem is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReducedDomain {
    /// KL modes restricted to `D_i`; the form `a(ω;·,·)` integrated over `D_i`.
    #[default]
    Neighborhood,
    /// Modes and form on the whole oversampled block `D_i^+`.
    Oversampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalReduceConfig {
    /// Oversampling width in fine cells.
    pub layers: usize,
    /// Size of `Ω_d^subset`; `None` picks `max(⌈0.1 M⌉, 8)` capped at `M`.
    pub subset_size: Option<usize>,
    pub eps: f64,
    pub alpha: f64,
    pub k_probe: usize,
    pub k_init: usize,
    /// Cap on the certified snapshot count; `None` means `|∂D_i^+|`.
    pub k_max: Option<usize>,
    pub energy_tol: f64,
    /// Use the PDE source in the local problems instead of harmonic snapshots.
    pub include_source: bool,
    pub reduced_domain: ReducedDomain,
    pub seed: u64,
}

impl Default for LocalReduceConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            subset_size: None,
            eps: 1e-3,
            alpha: 10.0,
            k_probe: 5,
            k_init: 1,
            k_max: None,
            energy_tol: 0.99,
            include_source: false,
            reduced_domain: ReducedDomain::Neighborhood,
            seed: 17,
        }
    }
}

impl LocalReduceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.alpha > 1.0) || self.k_probe == 0 || self.k_init == 0 {
            return Err(Error::Config(format!(
                "range finder needs eps > 0, alpha > 1, k_probe >= 1, k_init >= 1 (got {}, {}, {}, {})",
                self.eps, self.alpha, self.k_probe, self.k_init
            )));
        }
        if !(self.energy_tol > 0.0 && self.energy_tol <= 1.0) {
            return Err(Error::Config(format!(
                "energy_tol {} not in (0, 1]",
                self.energy_tol
            )));
        }
        Ok(())
    }

    /// Posterior threshold `(ε/α)·sqrt(π/2)` on each probe residual.
    pub fn probe_threshold(&self) -> f64 {
        probe_threshold(self.eps, self.alpha)
    }
}

pub fn probe_threshold(eps: f64, alpha: f64) -> f64 {
    eps / alpha * (std::f64::consts::PI / 2.0).sqrt()
}

/// Default `Ω_d^subset`: the first `max(⌈0.1 M⌉, 8)` realizations (all of them if fewer).
pub fn default_subset(m: usize, size: Option<usize>) -> Vec<usize> {
    let s = size.unwrap_or_else(|| ((m as f64 * 0.1).ceil() as usize).max(8));
    (0..s.clamp(1, m)).collect()
}

/// Gaussian boundary data `R_j` for neighborhood `i`.
pub fn sample_random_boundary(len: usize, seed: u64, i: usize, j: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::TAG_BOUNDARY, i as u64, j as u64]);
    (0..len).map(|_| r.sample(StandardNormal)).collect()
}

fn sample_probe(len: usize, seed: u64, i: usize, k: usize, p: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::TAG_PROBE, i as u64, k as u64, p as u64]);
    (0..len).map(|_| r.sample(StandardNormal)).collect()
}

/// Linear map accessed only through products, as in the range-finding problem.
pub trait RangeOperator {
    fn input_dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Inner product on the output space.
    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        dot(a, b)
    }
}

/// Orthonormal basis grown one image at a time (classical Gram–Schmidt, twice).
#[derive(Debug, Clone, Default)]
pub struct OrthoBasis {
    pub columns: Vec<Vec<f64>>,
}

impl OrthoBasis {
    fn project_out<O: RangeOperator + ?Sized>(&self, op: &O, v: &mut [f64]) {
        for _ in 0..2 {
            let coeffs: Vec<f64> = self.columns.iter().map(|q| op.inner(q, v)).collect();
            for (q, c) in self.columns.iter().zip(coeffs) {
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
    }

    /// `‖(I − QQᵀ) v‖` in the operator's inner product.
    pub fn residual_norm<O: RangeOperator + ?Sized>(&self, op: &O, v: &[f64]) -> f64 {
        let mut r = v.to_vec();
        self.project_out(op, &mut r);
        op.inner(&r, &r).max(0.0).sqrt()
    }

    /// Adds `v` if it is not numerically in the span; returns whether it was added.
    pub fn push<O: RangeOperator + ?Sized>(&mut self, op: &O, v: &[f64]) -> bool {
        let scale = op.inner(v, v).max(0.0).sqrt();
        let mut r = v.to_vec();
        self.project_out(op, &mut r);
        let nrm = op.inner(&r, &r).max(0.0).sqrt();
        if nrm <= 1e-13 * scale || nrm == 0.0 {
            return false;
        }
        r.iter_mut().for_each(|x| *x /= nrm);
        self.columns.push(r);
        true
    }
}

/// Outcome of the adaptive range finder.
#[derive(Debug, Clone)]
pub struct Certification {
    /// Number of random inputs used.
    pub k: usize,
    pub basis: OrthoBasis,
    /// Residuals of the final probe round.
    pub probe_residuals: Vec<f64>,
    pub threshold: f64,
    /// `k_max` reached without passing the posterior test.
    pub capped: bool,
}

/// Grows `Q = orth[T r_1 .. T r_k]` until `k_probe` fresh probes all satisfy
/// `‖(I − QQᵀ) T ω‖ ≤ (ε/α)·sqrt(π/2)`.
///
/// Probes for a given `k` come from `probe(k, p)`, so runs that differ only in
/// `eps` see identical probe vectors at equal `k`.
#[allow(clippy::too_many_arguments)]
pub fn certify_range<O, S, P>(
    op: &O,
    mut sample: S,
    mut probe: P,
    k_init: usize,
    eps: f64,
    alpha: f64,
    k_probe: usize,
    k_max: usize,
) -> Result<Certification>
where
    O: RangeOperator + ?Sized,
    S: FnMut(usize) -> Vec<f64>,
    P: FnMut(usize, usize) -> Vec<f64>,
{
    let threshold = probe_threshold(eps, alpha);
    let k_max = k_max.max(1);
    let mut basis = OrthoBasis::default();
    let mut k = 0;
    let target = k_init.clamp(1, k_max);
    while k < target {
        let image = op.apply(&sample(k))?;
        basis.push(op, &image);
        k += 1;
    }
    loop {
        let mut residuals = Vec::with_capacity(k_probe);
        for p in 0..k_probe {
            let image = op.apply(&probe(k, p))?;
            residuals.push(basis.residual_norm(op, &image));
        }
        let passed = residuals.iter().all(|&r| r <= threshold);
        if passed || k >= k_max {
            if !passed {
                log::warn!(
                    "range finder capped at k = {k}: max probe residual {:.3e} > {threshold:.3e}",
                    residuals.iter().cloned().fold(0.0, f64::max)
                );
            }
            return Ok(Certification {
                k,
                basis,
                probe_residuals: residuals,
                threshold,
                capped: !passed,
            });
        }
        let image = op.apply(&sample(k))?;
        basis.push(op, &image);
        k += 1;
    }
}

/// Harmonic extension from `∂D_i^+` into `D_i^+`, observed on `D_i` in `L²(D_i)`.
pub struct HarmonicExtensionOperator {
    solver: DirichletSolver,
    inner_map: Vec<usize>,
    mass: CsrMatrix,
}

impl HarmonicExtensionOperator {
    pub fn new(over: &OversampledNeighborhood, kappa: &[f64]) -> Result<Self> {
        let k = assemble_stiffness(&over.region, &over.region.restrict_cells(kappa))?;
        Ok(Self {
            solver: DirichletSolver::new(k, &over.boundary_nodes)?,
            inner_map: over.inner_node_map(),
            mass: assemble_unit_mass(&over.inner),
        })
    }
}

impl RangeOperator for HarmonicExtensionOperator {
    fn input_dim(&self) -> usize {
        self.solver.fixed_nodes().len()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.solver.solve(None, x)?;
        Ok(self.inner_map.iter().map(|&n| u[n]).collect())
    }

    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.mass.bilinear(a, b)
    }
}

/// Certified snapshot count `k^i` for one representative realization.
pub fn certify_snapshot_count(
    over: &OversampledNeighborhood,
    kappa: &[f64],
    cfg: &LocalReduceConfig,
) -> Result<Certification> {
    let op = HarmonicExtensionOperator::new(over, kappa)?;
    let nb = op.input_dim();
    let i = over.base;
    certify_range(
        &op,
        |j| sample_random_boundary(nb, cfg.seed, i, j),
        |k, p| sample_probe(nb, cfg.seed, i, k, p),
        cfg.k_init,
        cfg.eps,
        cfg.alpha,
        cfg.k_probe,
        cfg.k_max.unwrap_or(nb),
    )
    .map_err(|e| e.tagged(format!("certification in neighborhood {i}")))
}

/// Randomized-boundary snapshots `ψ_j^i(·, ω)` on `D_i^+`.
#[derive(Debug, Clone)]
pub struct LocalSnapshotSet {
    pub neighborhood: usize,
    pub subset: Vec<usize>,
    pub boundary: Vec<Vec<f64>>,
    /// `snapshots[s][j]`: nodal field on `D_i^+` for `subset[s]`, boundary sample `j`.
    pub snapshots: Vec<Vec<Vec<f64>>>,
}

impl LocalSnapshotSet {
    pub fn k(&self) -> usize {
        self.boundary.len()
    }
}

pub fn local_randomized_snapshots(
    over: &OversampledNeighborhood,
    ensemble: &PermeabilityEnsemble,
    subset: &[usize],
    k: usize,
    seed: u64,
    f_local: Option<&Source>,
) -> Result<LocalSnapshotSet> {
    if subset.is_empty() || k == 0 {
        return Err(Error::Config(
            "snapshot generation needs a nonempty subset and k >= 1".into(),
        ));
    }
    let i = over.base;
    let nb = over.boundary_nodes.len();
    let boundary: Vec<Vec<f64>> = (0..k)
        .map(|j| sample_random_boundary(nb, seed, i, j))
        .collect();
    let load = f_local.map(|f| assemble_load(&over.region, f));
    let mut snapshots = Vec::with_capacity(subset.len());
    for &w in subset {
        let kappa = over.region.restrict_cells(&ensemble.realizations[w]);
        let solver = DirichletSolver::new(
            assemble_stiffness(&over.region, &kappa)?,
            &over.boundary_nodes,
        )
        .map_err(|e| e.tagged(format!("snapshots (i={i}, ω={w})")))?;
        let per_j = boundary
            .iter()
            .enumerate()
            .map(|(j, r)| {
                solver
                    .solve(load.as_deref(), r)
                    .map_err(|e| e.tagged(format!("snapshot (i={i}, j={j}, ω={w})")))
            })
            .collect::<Result<Vec<_>>>()?;
        snapshots.push(per_j);
    }
    Ok(LocalSnapshotSet {
        neighborhood: i,
        subset: subset.to_vec(),
        boundary,
        snapshots,
    })
}

/// Karhunen–Loève model of the snapshot family of one neighborhood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlModel {
    pub neighborhood: usize,
    /// `ψ̄_j` on `D_i^+`, one per boundary sample.
    pub means: Vec<Vec<f64>>,
    /// Retained modes `φ_l` on `D_i^+`, `L²(D_i^+)`-orthonormal.
    pub modes: Vec<Vec<f64>>,
    /// All covariance eigenvalues, nonincreasing.
    pub energies: Vec<f64>,
    /// `coefficients[s][j][l] = (ψ_j(·, ω_s) − ψ̄_j, φ_l)`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
}

impl KlModel {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn retained_fraction(&self) -> f64 {
        let total: f64 = self.energies.iter().sum();
        if total == 0.0 {
            return 1.0;
        }
        self.energies[..self.num_modes()].iter().sum::<f64>() / total
    }
}

/// Pooled KL expansion: per-`j` means, modes shared across `j`.
///
/// `mass` is the `L²(D_i^+)` Gram matrix of the nodal basis.
pub fn kl_expand(snaps: &LocalSnapshotSet, mass: &CsrMatrix, energy_tol: f64) -> Result<KlModel> {
    let s = snaps.snapshots.len();
    let k = snaps.k();
    let n_nodes = mass.n;
    if s == 0 || k == 0 {
        return Err(Error::Config(
            "KL expansion needs at least one snapshot".into(),
        ));
    }
    let means: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut m = vec![0.0; n_nodes];
            for per in &snaps.snapshots {
                for (a, b) in m.iter_mut().zip(&per[j]) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|v| *v /= s as f64);
            m
        })
        .collect();
    let n = s * k;
    let mut x = DMatrix::<f64>::zeros(n_nodes, n);
    let mut mx = DMatrix::<f64>::zeros(n_nodes, n);
    let mut scale = 0.0;
    for (si, per) in snaps.snapshots.iter().enumerate() {
        for j in 0..k {
            let col = si * k + j;
            let centered: Vec<f64> = per[j].iter().zip(&means[j]).map(|(a, b)| a - b).collect();
            let mc = mass.mul_vec(&centered);
            scale += mass.bilinear(&per[j], &per[j]);
            x.set_column(col, &DVector::from_vec(centered));
            mx.set_column(col, &DVector::from_vec(mc));
        }
    }
    let gram = (x.transpose() * &mx) / n as f64;
    let gram = (&gram + gram.transpose()) * 0.5;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let energies: Vec<f64> = order.iter().map(|&o| eig.eigenvalues[o].max(0.0)).collect();
    let total: f64 = energies.iter().sum();
    let mut modes: Vec<Vec<f64>> = Vec::new();
    if total > 1e-24 * (scale / n as f64) && total > 0.0 {
        let floor = 1e-12 * energies[0];
        let mut acc = 0.0;
        for (rank, &o) in order.iter().enumerate() {
            let mu = energies[rank];
            if mu <= floor {
                break;
            }
            let v = eig.eigenvectors.column(o);
            let phi = (&x * v) / (n as f64 * mu).sqrt();
            modes.push(phi.as_slice().to_vec());
            acc += mu;
            if acc >= energy_tol * total {
                break;
            }
        }
        mass_orthonormalize(&mut modes, mass);
    }
    let mode_mass: Vec<Vec<f64>> = modes.iter().map(|m| mass.mul_vec(m)).collect();
    let coefficients = (0..s)
        .map(|si| {
            (0..k)
                .map(|j| {
                    let c = x.column(si * k + j);
                    mode_mass.iter().map(|mm| dot(c.as_slice(), mm)).collect()
                })
                .collect()
        })
        .collect();
    Ok(KlModel {
        neighborhood: snaps.neighborhood,
        means,
        modes,
        energies,
        coefficients,
    })
}

fn mass_orthonormalize(vs: &mut Vec<Vec<f64>>, mass: &CsrMatrix) {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs.drain(..) {
        let mut r = v;
        for _ in 0..2 {
            for q in &out {
                let c = mass.bilinear(q, &r);
                for (ri, qi) in r.iter_mut().zip(q) {
                    *ri -= c * qi;
                }
            }
        }
        let nrm = mass.bilinear(&r, &r).max(0.0).sqrt();
        if nrm > 0.0 {
            r.iter_mut().for_each(|x| *x /= nrm);
            out.push(r);
        }
    }
    *vs = out;
}

/// Precomputed pieces of the per-realization reduced problem for one neighborhood.
pub struct ReducedSolver {
    region: Region,
    /// Modes on `region`, one column each.
    modes: DMatrix<f64>,
    /// Means on `region`, one column per boundary sample.
    means: DMatrix<f64>,
    domain: ReducedDomain,
}

impl ReducedSolver {
    pub fn new(kl: &KlModel, over: &OversampledNeighborhood, domain: ReducedDomain) -> Self {
        let (region, map): (Region, Vec<usize>) = match domain {
            ReducedDomain::Neighborhood => (over.inner, over.inner_node_map()),
            ReducedDomain::Oversampled => (over.region, (0..over.region.num_nodes()).collect()),
        };
        let nn = map.len();
        let modes = DMatrix::from_fn(nn, kl.num_modes(), |r, c| kl.modes[c][map[r]]);
        let means = DMatrix::from_fn(nn, kl.k(), |r, c| kl.means[c][map[r]]);
        Self {
            region,
            modes,
            means,
            domain,
        }
    }

    pub fn domain(&self) -> ReducedDomain {
        self.domain
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn num_modes(&self) -> usize {
        self.modes.ncols()
    }

    /// Coefficients `p̃_{j,l}(ω)` flattened as `j * L + l`.
    pub fn solve(&self, kappa: &[f64], f_local: Option<&Source>) -> Result<Vec<f64>> {
        let l = self.num_modes();
        let k = self.means.ncols();
        if l == 0 {
            return Ok(Vec::new());
        }
        let stiff = assemble_stiffness(&self.region, &self.region.restrict_cells(kappa))?;
        let mut k_modes = DMatrix::<f64>::zeros(self.modes.nrows(), l);
        for c in 0..l {
            let y = stiff.mul_vec(self.modes.column(c).as_slice());
            k_modes.set_column(c, &DVector::from_vec(y));
        }
        let a = self.modes.transpose() * &k_modes;
        let a = (&a + a.transpose()) * 0.5;
        // rhs[:, j] = Φᵀ l − Φᵀ K ψ̄_j
        let mut rhs = -(k_modes.transpose() * &self.means);
        if let Some(f) = f_local {
            let load = DVector::from_vec(assemble_load(&self.region, f));
            let pl = self.modes.transpose() * load;
            for j in 0..k {
                let mut col = rhs.column_mut(j);
                col += &pl;
            }
        }
        let sol = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                let shift = 1e-12 * a.trace().abs().max(f64::MIN_POSITIVE) / l as f64;
                log::warn!("reduced local system singular, regularizing with shift {shift:.3e}");
                let reg = &a + DMatrix::identity(l, l) * shift;
                reg.cholesky()
                    .ok_or_else(|| {
                        Error::numerical("reduced local solve", "regularized system not SPD")
                    })?
                    .solve(&rhs)
            }
        };
        let mut out = Vec::with_capacity(k * l);
        for j in 0..k {
            out.extend(sol.column(j).iter());
        }
        Ok(out)
    }
}

/// Reduced coefficients of one realization in one neighborhood.
pub fn reduced_local_solve(
    kl: &KlModel,
    over: &OversampledNeighborhood,
    kappa: &[f64],
    domain: ReducedDomain,
    f_local: Option<&Source>,
) -> Result<Vec<f64>> {
    ReducedSolver::new(kl, over, domain).solve(kappa, f_local)
}

/// Reduced coefficients over all of `Ω_d` for one neighborhood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedCoefficients {
    pub neighborhood: usize,
    pub k: usize,
    pub num_modes: usize,
    /// One row per realization, length `k · L`.
    pub rows: Vec<Vec<f64>>,
}

/// Everything the clustering stage needs from one neighborhood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborhoodReduction {
    pub neighborhood: usize,
    pub certified_k: usize,
    pub capped: bool,
    pub kl: KlModel,
    pub reduced: ReducedCoefficients,
}

/// Runs certification, snapshots, KL and the reduced solves for one neighborhood.
pub fn reduce_neighborhood(
    nbhd: &Neighborhood,
    ensemble: &PermeabilityEnsemble,
    cfg: &LocalReduceConfig,
    source: &Source,
) -> Result<NeighborhoodReduction> {
    let over = crate::grid::oversample(nbhd, cfg.layers);
    let subset = default_subset(ensemble.len(), cfg.subset_size);
    let cert = certify_snapshot_count(&over, &ensemble.realizations[subset[0]], cfg)?;
    let f_local = cfg.include_source.then_some(source);
    let snaps = local_randomized_snapshots(&over, ensemble, &subset, cert.k, cfg.seed, f_local)?;
    let mass = assemble_unit_mass(&over.region);
    let kl = kl_expand(&snaps, &mass, cfg.energy_tol)?;
    let solver = ReducedSolver::new(&kl, &over, cfg.reduced_domain);
    let rows = ensemble
        .realizations
        .iter()
        .enumerate()
        .map(|(w, kappa)| {
            solver
                .solve(kappa, f_local)
                .map_err(|e| e.tagged(format!("reduced solve (i={}, ω={w})", nbhd.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NeighborhoodReduction {
        neighborhood: nbhd.id,
        certified_k: cert.k,
        capped: cert.capped,
        reduced: ReducedCoefficients {
            neighborhood: nbhd.id,
            k: kl.k(),
            num_modes: kl.num_modes(),
            rows,
        },
        kl,
    })
}
