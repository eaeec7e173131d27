//! Global coarse Galerkin solves, downscaling and error metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_load, assemble_stiffness, assemble_unit_mass, Source};
use crate::fields::PermeabilityEnsemble;
use crate::grid::{FineGrid, Region};
use crate::linalg::CsrMatrix;
use crate::offline::OfflineSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    #[default]
    PerRealization,
    Ensemble,
}

impl SolveMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveMode::PerRealization => "per_realization",
            SolveMode::Ensemble => "ensemble",
        }
    }
}

/// Node pairs shared by two neighborhoods, in each one's local numbering.
#[derive(Debug, Clone)]
pub struct Overlaps {
    pairs: HashMap<(usize, usize), Vec<(usize, usize)>>,
    neighbors: Vec<Vec<usize>>,
}

impl Overlaps {
    pub fn new(regions: &[Region]) -> Self {
        let mut pairs = HashMap::new();
        let mut neighbors = vec![Vec::new(); regions.len()];
        for (a, ra) in regions.iter().enumerate() {
            for (b, rb) in regions.iter().enumerate() {
                let x0 = ra.cx0.max(rb.cx0);
                let x1 = (ra.cx0 + ra.ncx).min(rb.cx0 + rb.ncx);
                let y0 = ra.cy0.max(rb.cy0);
                let y1 = (ra.cy0 + ra.ncy).min(rb.cy0 + rb.ncy);
                if x0 > x1 || y0 > y1 {
                    continue;
                }
                let mut list = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
                for iy in y0..=y1 {
                    for ix in x0..=x1 {
                        let g = ra.grid.node_index(ix, iy);
                        list.push((
                            ra.local_of_global(g).expect("inside a"),
                            rb.local_of_global(g).expect("inside b"),
                        ));
                    }
                }
                neighbors[a].push(b);
                pairs.insert((a, b), list);
            }
        }
        Self { pairs, neighbors }
    }

    pub fn pairs(&self, a: usize, b: usize) -> Option<&[(usize, usize)]> {
        self.pairs.get(&(a, b)).map(|v| v.as_slice())
    }

    pub fn neighbors(&self, a: usize) -> &[usize] {
        &self.neighbors[a]
    }
}

/// Per-realization Galerkin matrix and load restricted to a column list.
#[derive(Debug, Clone)]
pub struct LocalSystem {
    pub columns: Vec<usize>,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

/// Assembles coarse systems for one offline space and source.
pub struct CoarseAssembler<'a> {
    pub space: &'a OfflineSpace,
    pub grid: FineGrid,
    pub load: Vec<f64>,
    pub overlaps: Overlaps,
}

impl<'a> CoarseAssembler<'a> {
    pub fn new(space: &'a OfflineSpace, grid: FineGrid, f: &Source) -> Self {
        Self {
            space,
            grid,
            load: assemble_load(&grid.whole(), f),
            overlaps: Overlaps::new(&space.regions),
        }
    }

    /// `A[pq] = ∫ κ(ω) ∇Φ_p·∇Φ_q`, `b[p] = ∫ f Φ_p` over the given columns.
    pub fn system(&self, kappa: &[f64], columns: &[usize]) -> Result<LocalSystem> {
        let space = self.space;
        let n = columns.len();
        let mut stiff: HashMap<usize, CsrMatrix> = HashMap::new();
        for &c in columns {
            let i = space.columns[c].neighborhood;
            if let std::collections::hash_map::Entry::Vacant(e) = stiff.entry(i) {
                let region = &space.regions[i];
                e.insert(assemble_stiffness(region, &region.restrict_cells(kappa))?);
            }
        }
        let images: Vec<Vec<f64>> = columns
            .iter()
            .map(|&c| {
                let col = &space.columns[c];
                stiff[&col.neighborhood].mul_vec(&col.values)
            })
            .collect();
        let mut by_nbhd: HashMap<usize, Vec<usize>> = HashMap::new();
        for (a, &c) in columns.iter().enumerate() {
            by_nbhd
                .entry(space.columns[c].neighborhood)
                .or_default()
                .push(a);
        }
        let mut matrix = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for (a, &c) in columns.iter().enumerate() {
            let col = &space.columns[c];
            let i = col.neighborhood;
            let region = &space.regions[i];
            rhs[a] = col
                .values
                .iter()
                .enumerate()
                .map(|(l, v)| v * self.load[region.global_node(l)])
                .sum();
            for &i2 in self.overlaps.neighbors(i) {
                let Some(members) = by_nbhd.get(&i2) else {
                    continue;
                };
                let pairs = self.overlaps.pairs(i, i2).expect("neighbor pair");
                for &b in members {
                    if b < a {
                        continue;
                    }
                    let other = &space.columns[columns[b]].values;
                    let v: f64 = pairs
                        .iter()
                        .map(|&(la, lb)| images[a][la] * other[lb])
                        .sum();
                    matrix[(a, b)] = v;
                    matrix[(b, a)] = v;
                }
            }
        }
        Ok(LocalSystem {
            columns: columns.to_vec(),
            matrix,
            rhs,
        })
    }

    /// Nodal superposition of the given coefficients.
    pub fn downscale(&self, coefficients: &[f64]) -> Vec<f64> {
        downscale(self.space, self.grid, coefficients)
    }
}

/// Field `Σ_p c_p Φ_p` on the fine grid; `coefficients` spans all columns.
pub fn downscale(space: &OfflineSpace, grid: FineGrid, coefficients: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; grid.num_nodes()];
    for (col, &c) in space.columns.iter().zip(coefficients) {
        if c == 0.0 {
            continue;
        }
        let region = &space.regions[col.neighborhood];
        for (l, v) in col.values.iter().enumerate() {
            u[region.global_node(l)] += c * v;
        }
    }
    u
}

fn solve_dense(sys: &LocalSystem, space: &OfflineSpace, context: &str) -> Result<DVector<f64>> {
    if sys.columns.is_empty() {
        return Ok(DVector::zeros(0));
    }
    match sys.matrix.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&sys.rhs)),
        None => {
            let dmax = sys.matrix.diagonal().amax();
            let mut bad: Vec<usize> = sys
                .columns
                .iter()
                .enumerate()
                .filter(|&(a, _)| sys.matrix[(a, a)] <= 1e-14 * dmax)
                .map(|(_, &c)| space.columns[c].neighborhood)
                .collect();
            bad.sort_unstable();
            bad.dedup();
            let detail = if bad.is_empty() {
                "coarse matrix not positive definite (numerically dependent columns)".to_string()
            } else {
                format!("coarse matrix singular; degenerate columns in neighborhoods {bad:?}")
            };
            Err(Error::numerical(context, detail))
        }
    }
}

/// Coefficients and downscaled fields for every realization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoarseSolution {
    pub mode: SolveMode,
    /// `coefficients[ω]` over all columns, zero on inactive ones.
    pub coefficients: Vec<Vec<f64>>,
    pub fields: Vec<Vec<f64>>,
}

fn scatter(ncols: usize, columns: &[usize], x: &DVector<f64>) -> Vec<f64> {
    let mut full = vec![0.0; ncols];
    for (&c, v) in columns.iter().zip(x.iter()) {
        full[c] = *v;
    }
    full
}

/// Coefficients of one realization in its own active space.
pub fn solve_realization(
    asm: &CoarseAssembler,
    ensemble: &PermeabilityEnsemble,
    omega: usize,
) -> Result<Vec<f64>> {
    let ctx = format!("coarse solve (ω={omega})");
    let cols = asm.space.active_columns(omega);
    let sys = asm
        .system(&ensemble.realizations[omega], &cols)
        .map_err(|e| e.tagged(&ctx))?;
    let x = solve_dense(&sys, asm.space, &ctx)?;
    Ok(scatter(asm.space.dim(), &cols, &x))
}

pub fn solve_per_realization(
    space: &OfflineSpace,
    ensemble: &PermeabilityEnsemble,
    f: &Source,
) -> Result<CoarseSolution> {
    check_space(space, ensemble)?;
    let asm = CoarseAssembler::new(space, ensemble.grid, f);
    let coefficients = (0..ensemble.len())
        .into_par_iter()
        .map(|w| solve_realization(&asm, ensemble, w))
        .collect::<Result<Vec<_>>>()?;
    let fields = coefficients.par_iter().map(|c| asm.downscale(c)).collect();
    Ok(CoarseSolution {
        mode: SolveMode::PerRealization,
        coefficients,
        fields,
    })
}

/// Weighted ensemble Galerkin matrix over all columns.
pub fn ensemble_system(
    asm: &CoarseAssembler,
    ensemble: &PermeabilityEnsemble,
) -> Result<LocalSystem> {
    let n = asm.space.dim();
    let mut matrix = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    let chunk = rayon::current_num_threads().max(1) * 2;
    let ids: Vec<usize> = (0..ensemble.len()).collect();
    for block in ids.chunks(chunk) {
        let parts = block
            .par_iter()
            .map(|&w| {
                let cols = asm.space.active_columns(w);
                asm.system(&ensemble.realizations[w], &cols)
                    .map_err(|e| e.tagged(format!("ensemble assembly (ω={w})")))
            })
            .collect::<Result<Vec<_>>>()?;
        for (&w, sys) in block.iter().zip(parts) {
            let wt = ensemble.weights[w];
            for (a, &ca) in sys.columns.iter().enumerate() {
                rhs[ca] += wt * sys.rhs[a];
                for (b, &cb) in sys.columns.iter().enumerate() {
                    matrix[(ca, cb)] += wt * sys.matrix[(a, b)];
                }
            }
        }
    }
    Ok(LocalSystem {
        columns: (0..n).collect(),
        matrix,
        rhs,
    })
}

pub fn solve_ensemble_galerkin(
    space: &OfflineSpace,
    ensemble: &PermeabilityEnsemble,
    f: &Source,
) -> Result<CoarseSolution> {
    check_space(space, ensemble)?;
    if ensemble.is_empty() {
        return Err(Error::Config("empty ensemble".into()));
    }
    let asm = CoarseAssembler::new(space, ensemble.grid, f);
    let sys = ensemble_system(&asm, ensemble)?;
    let x = solve_dense(&sys, space, "ensemble coarse solve")?;
    let coefficients: Vec<Vec<f64>> = (0..ensemble.len())
        .map(|w| {
            (0..space.dim())
                .map(|c| if space.is_active(c, w) { x[c] } else { 0.0 })
                .collect()
        })
        .collect();
    let fields = coefficients.par_iter().map(|c| asm.downscale(c)).collect();
    Ok(CoarseSolution {
        mode: SolveMode::Ensemble,
        coefficients,
        fields,
    })
}

pub fn solve(
    space: &OfflineSpace,
    ensemble: &PermeabilityEnsemble,
    f: &Source,
    mode: SolveMode,
) -> Result<CoarseSolution> {
    match mode {
        SolveMode::PerRealization => solve_per_realization(space, ensemble, f),
        SolveMode::Ensemble => solve_ensemble_galerkin(space, ensemble, f),
    }
}

fn check_space(space: &OfflineSpace, ensemble: &PermeabilityEnsemble) -> Result<()> {
    if space.num_realizations() != ensemble.len() {
        return Err(Error::Mismatch(format!(
            "offline space labels {} realizations, ensemble has {}",
            space.num_realizations(),
            ensemble.len()
        )));
    }
    if space.regions.iter().any(|r| r.grid != ensemble.grid) {
        return Err(Error::Mismatch(
            "offline space and ensemble live on different grids".into(),
        ));
    }
    Ok(())
}

/// Default error subset `S`: the first `min(10, M)` realizations.
pub fn default_error_subset(m: usize) -> Vec<usize> {
    (0..m.min(10)).collect()
}

/// The four ensemble error metrics, raw and normalized by the matching norm of `u_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub e1_omega: f64,
    pub e2_omega: f64,
    pub e1_s: f64,
    pub e2_s: f64,
    pub rel_e1_omega: f64,
    pub rel_e2_omega: f64,
    pub rel_e1_s: f64,
    pub rel_e2_s: f64,
    pub subset: Vec<usize>,
    /// `sqrt(Σ_S a(ω; e, e) / Σ_S a(ω; u_h, u_h))` when computed.
    pub rel_energy_s: Option<f64>,
    pub normalization: String,
}

pub const NORMALIZATION: &str = "each metric divided by the same metric evaluated with u_H = 0";

fn safe_ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Error metrics with spatial integrals by the fine mass matrix `mass`.
pub fn compute_errors_with_mass(
    u_h: &[Vec<f64>],
    u_ms: &[Vec<f64>],
    weights: &[f64],
    subset: &[usize],
    mass: &CsrMatrix,
) -> Result<ErrorReport> {
    if u_h.len() != u_ms.len() || u_h.len() != weights.len() {
        return Err(Error::Mismatch(format!(
            "{} reference fields, {} coarse fields, {} weights",
            u_h.len(),
            u_ms.len(),
            weights.len()
        )));
    }
    if u_h.iter().chain(u_ms).any(|u| u.len() != mass.n) {
        return Err(Error::Mismatch("fields do not match the fine grid".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&s| s >= u_h.len()) {
        return Err(Error::Mismatch(format!("subset id {bad} out of range")));
    }
    let n = mass.n;
    let diff: Vec<Vec<f64>> = u_h
        .iter()
        .zip(u_ms)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    let metrics = |fields: &[Vec<f64>]| -> [f64; 4] {
        let sq: Vec<f64> = fields.iter().map(|e| mass.bilinear(e, e)).collect();
        let e1_omega = weights
            .iter()
            .zip(&sq)
            .map(|(w, s)| w * s)
            .sum::<f64>()
            .max(0.0)
            .sqrt();
        let mut mean = vec![0.0; n];
        for (w, e) in weights.iter().zip(fields) {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += w * v;
            }
        }
        let e2_omega = mass.bilinear(&mean, &mean).max(0.0).sqrt();
        let e1_s = subset.iter().map(|&s| sq[s]).sum::<f64>().max(0.0).sqrt();
        let mut sum = vec![0.0; n];
        for &s in subset {
            for (m, v) in sum.iter_mut().zip(&fields[s]) {
                *m += v;
            }
        }
        let e2_s = mass.bilinear(&sum, &sum).max(0.0).sqrt();
        [e1_omega, e2_omega, e1_s, e2_s]
    };
    let e = metrics(&diff);
    let r = metrics(u_h);
    Ok(ErrorReport {
        e1_omega: e[0],
        e2_omega: e[1],
        e1_s: e[2],
        e2_s: e[3],
        rel_e1_omega: safe_ratio(e[0], r[0]),
        rel_e2_omega: safe_ratio(e[1], r[1]),
        rel_e1_s: safe_ratio(e[2], r[2]),
        rel_e2_s: safe_ratio(e[3], r[3]),
        subset: subset.to_vec(),
        rel_energy_s: None,
        normalization: NORMALIZATION.to_string(),
    })
}

pub fn compute_errors(
    u_h: &[Vec<f64>],
    u_ms: &[Vec<f64>],
    ensemble: &PermeabilityEnsemble,
    subset: &[usize],
) -> Result<ErrorReport> {
    let mass = assemble_unit_mass(&ensemble.grid.whole());
    compute_errors_with_mass(u_h, u_ms, &ensemble.weights, subset, &mass)
}

/// `a(ω; e, e)` on the whole domain.
pub fn energy_sq(grid: FineGrid, kappa: &[f64], e: &[f64]) -> Result<f64> {
    Ok(assemble_stiffness(&grid.whole(), kappa)?.bilinear(e, e))
}

/// Relative energy error over `subset`.
pub fn relative_energy_error(
    u_h: &[Vec<f64>],
    u_ms: &[Vec<f64>],
    ensemble: &PermeabilityEnsemble,
    subset: &[usize],
) -> Result<f64> {
    let parts = subset
        .par_iter()
        .map(|&s| {
            let k = assemble_stiffness(&ensemble.grid.whole(), &ensemble.realizations[s])?;
            let e: Vec<f64> = u_h[s].iter().zip(&u_ms[s]).map(|(a, b)| a - b).collect();
            Ok((k.bilinear(&e, &e), k.bilinear(&u_h[s], &u_h[s])))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (num, den) = parts
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    Ok(safe_ratio(num.max(0.0).sqrt(), den.sqrt()))
}

pub const ERROR_CSV_HEADER: &str = "J,n_basis,mode,e1_omega,e2_omega,e1_S,e2_S";

impl ErrorReport {
    /// One `errors.csv` row with the normalized metrics.
    pub fn csv_row(&self, clusters: usize, n_basis: usize, mode: SolveMode) -> String {
        let mut s = String::new();
        write!(
            s,
            "{clusters},{n_basis},{},{:.10e},{:.10e},{:.10e},{:.10e}",
            mode.as_str(),
            self.rel_e1_omega,
            self.rel_e2_omega,
            self.rel_e1_s,
            self.rel_e2_s
        )
        .expect("write to string");
        s
    }
}
