//! Q1 finite element kernels on rectangular regions of the fine grid.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::PermeabilityEnsemble;
use crate::grid::{FineGrid, Region};
use crate::linalg::{norm2, BandedCholesky, CsrMatrix};

pub use crate::linalg::{generalized_eig, EigenDecomposition};

/// Normwise backward error accepted from a Dirichlet solve.
pub const SOLVE_RTOL: f64 = 1e-10;

// Q1 element matrices on a rectangle, nodes ordered (0,0),(1,0),(1,1),(0,1).
// x-derivative part scaled by hy/(6 hx), y-derivative part by hx/(6 hy).
const KX: [[f64; 4]; 4] = [
    [2.0, -2.0, -1.0, 1.0],
    [-2.0, 2.0, 1.0, -1.0],
    [-1.0, 1.0, 2.0, -2.0],
    [1.0, -1.0, -2.0, 2.0],
];
const KY: [[f64; 4]; 4] = [
    [2.0, 1.0, -1.0, -2.0],
    [1.0, 2.0, -2.0, -1.0],
    [-1.0, -2.0, 2.0, 1.0],
    [-2.0, -1.0, 1.0, 2.0],
];
// scaled by hx hy / 36
const MASS: [[f64; 4]; 4] = [
    [4.0, 2.0, 1.0, 2.0],
    [2.0, 4.0, 2.0, 1.0],
    [1.0, 2.0, 4.0, 2.0],
    [2.0, 1.0, 2.0, 4.0],
];

/// Element stiffness of a unit-coefficient rectangle with sides `hx × hy`.
pub fn element_stiffness(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let sx = hy / (6.0 * hx);
    let sy = hx / (6.0 * hy);
    let mut k = [[0.0; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            k[p][q] = sx * KX[p][q] + sy * KY[p][q];
        }
    }
    k
}

pub fn element_mass(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let s = hx * hy / 36.0;
    let mut m = [[0.0; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            m[p][q] = s * MASS[p][q];
        }
    }
    m
}

/// CSR sparsity of the Q1 operator on a region (9-point stencil).
fn stencil_pattern(region: &Region) -> CsrMatrix {
    let w = region.ncx + 1;
    let h = region.ncy + 1;
    let mut row_ptr = Vec::with_capacity(w * h + 1);
    let mut col_idx = Vec::with_capacity(9 * w * h);
    row_ptr.push(0);
    for b in 0..h {
        for a in 0..w {
            for bb in b.saturating_sub(1)..=(b + 1).min(h - 1) {
                for aa in a.saturating_sub(1)..=(a + 1).min(w - 1) {
                    col_idx.push(bb * w + aa);
                }
            }
            row_ptr.push(col_idx.len());
        }
    }
    let nnz = col_idx.len();
    CsrMatrix {
        n: w * h,
        row_ptr,
        col_idx,
        values: vec![0.0; nnz],
    }
}

fn assemble_cellwise(region: &Region, weights: &[f64], element: &[[f64; 4]; 4]) -> CsrMatrix {
    let mut a = stencil_pattern(region);
    for (c, &wc) in weights.iter().enumerate() {
        if wc == 0.0 {
            continue;
        }
        let nodes = region.cell_nodes(c);
        for p in 0..4 {
            for q in 0..4 {
                let pos = a
                    .position(nodes[p], nodes[q])
                    .expect("stencil covers element");
                a.values[pos] += wc * element[p][q];
            }
        }
    }
    a
}

/// Stiffness matrix `∫ κ ∇N_p·∇N_q` on a region, no boundary conditions applied.
///
/// `coefficient` is indexed by the region's local cells.
pub fn assemble_stiffness(region: &Region, coefficient: &[f64]) -> Result<CsrMatrix> {
    if coefficient.len() != region.num_cells() {
        return Err(Error::Mismatch(format!(
            "coefficient has {} cells, region has {}",
            coefficient.len(),
            region.num_cells()
        )));
    }
    if let Some((c, v)) = coefficient
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v > 0.0) || !v.is_finite())
    {
        return Err(Error::Config(format!(
            "coefficient must be positive and finite, cell {c} has {v}"
        )));
    }
    let ke = element_stiffness(region.grid.hx(), region.grid.hy());
    Ok(assemble_cellwise(region, coefficient, &ke))
}

/// Mass matrix `∫ w N_p N_q` with a cellwise weight.
pub fn assemble_mass(region: &Region, weights: &[f64]) -> CsrMatrix {
    assert_eq!(weights.len(), region.num_cells());
    let me = element_mass(region.grid.hx(), region.grid.hy());
    assemble_cellwise(region, weights, &me)
}

/// Unit-weight mass matrix.
pub fn assemble_unit_mass(region: &Region) -> CsrMatrix {
    assemble_mass(region, &vec![1.0; region.num_cells()])
}

/// Right-hand side `f(x)`.
#[derive(Clone)]
pub enum Source {
    Constant(f64),
    /// Indexed by global fine cell.
    Cellwise(Arc<Vec<f64>>),
    /// Indexed by global fine node, interpolated bilinearly.
    Nodal(Arc<Vec<f64>>),
    Function(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::Constant(v) => write!(f, "Constant({v})"),
            Source::Cellwise(v) => write!(f, "Cellwise(len {})", v.len()),
            Source::Nodal(v) => write!(f, "Nodal(len {})", v.len()),
            Source::Function(_) => write!(f, "Function"),
        }
    }
}

impl Source {
    pub fn function(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Source::Function(Arc::new(f))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Source::Constant(v) => *v == 0.0,
            Source::Cellwise(v) | Source::Nodal(v) => v.iter().all(|&x| x == 0.0),
            Source::Function(_) => false,
        }
    }
}

/// Load vector `∫ f N_p` on a region with 2×2 Gauss quadrature per cell.
pub fn assemble_load(region: &Region, f: &Source) -> Vec<f64> {
    let mut b = vec![0.0; region.num_nodes()];
    if let Source::Constant(v) = f {
        if *v == 0.0 {
            return b;
        }
    }
    let grid = region.grid;
    let (hx, hy) = (grid.hx(), grid.hy());
    let g = 0.5 / 3f64.sqrt();
    let gauss = [0.5 - g, 0.5 + g];
    let wq = hx * hy / 4.0;
    for c in 0..region.num_cells() {
        let nodes = region.cell_nodes(c);
        let gc = region.global_cell(c);
        let (xc, yc) = grid.cell_center(gc);
        let (x0, y0) = (xc - 0.5 * hx, yc - 0.5 * hy);
        let gnodes = grid.cell_nodes(gc);
        for &eta in &gauss {
            for &xi in &gauss {
                let shape = [
                    (1.0 - xi) * (1.0 - eta),
                    xi * (1.0 - eta),
                    xi * eta,
                    (1.0 - xi) * eta,
                ];
                let fv = match f {
                    Source::Constant(v) => *v,
                    Source::Cellwise(v) => v[gc],
                    Source::Nodal(v) => (0..4).map(|p| shape[p] * v[gnodes[p]]).sum(),
                    Source::Function(func) => func(x0 + xi * hx, y0 + eta * hy),
                };
                for p in 0..4 {
                    b[nodes[p]] += wq * fv * shape[p];
                }
            }
        }
    }
    b
}

/// Factorized operator with Dirichlet rows/columns eliminated.
///
/// One factorization serves any number of load / boundary-value pairs.
#[derive(Debug, Clone)]
pub struct DirichletSolver {
    matrix: CsrMatrix,
    fixed: Vec<usize>,
    free: Vec<usize>,
    reduced: CsrMatrix,
    /// Max absolute row sum of `reduced`, bounding its 2-norm for symmetric matrices.
    reduced_norm: f64,
    factor: BandedCholesky,
}

impl DirichletSolver {
    /// `fixed` lists the constrained node ids in the order boundary values are supplied.
    pub fn new(matrix: CsrMatrix, fixed: &[usize]) -> Result<Self> {
        let mut is_fixed = vec![false; matrix.n];
        for &i in fixed {
            is_fixed[i] = true;
        }
        let free: Vec<usize> = (0..matrix.n).filter(|&i| !is_fixed[i]).collect();
        let reduced = matrix.principal_submatrix(&free);
        let factor = BandedCholesky::factor(&reduced)
            .map_err(|e| e.tagged("Dirichlet system (singular reduced operator)"))?;
        let reduced_norm = (0..reduced.n)
            .map(|i| reduced.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(Self {
            matrix,
            fixed: fixed.to_vec(),
            free,
            reduced,
            reduced_norm,
            factor,
        })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    pub fn fixed_nodes(&self) -> &[usize] {
        &self.fixed
    }

    /// Solves on the free nodes for a right-hand side given there.
    ///
    /// Iterative refinement runs until the normwise backward error
    /// `‖b − Ax‖ / (‖A‖‖x‖ + ‖b‖)` is at most [`SOLVE_RTOL`].
    pub fn solve_free(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let mut x = rhs.to_vec();
        self.factor.solve_in_place(&mut x);
        let bnorm = norm2(rhs);
        if bnorm == 0.0 {
            return Ok(x);
        }
        let anorm = self.reduced_norm;
        let backward = |x: &[f64]| -> (f64, Vec<f64>) {
            let ax = self.reduced.mul_vec(x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            (norm2(&r) / (anorm * norm2(x) + bnorm), r)
        };
        let (mut err, mut r) = backward(&x);
        for _ in 0..3 {
            if err <= SOLVE_RTOL {
                return Ok(x);
            }
            self.factor.solve_in_place(&mut r);
            let trial: Vec<f64> = x.iter().zip(&r).map(|(a, d)| a + d).collect();
            let (e, r2) = backward(&trial);
            if e >= err {
                break;
            }
            (x, err, r) = (trial, e, r2);
        }
        if err <= SOLVE_RTOL {
            Ok(x)
        } else {
            Err(Error::numerical(
                "Dirichlet solve",
                format!("backward error {err:.3e} after refinement"),
            ))
        }
    }

    /// Full nodal solution with `u = g` on the fixed nodes; `load` is the full
    /// load vector (or zero when `None`).
    pub fn solve(&self, load: Option<&[f64]>, g: &[f64]) -> Result<Vec<f64>> {
        assert_eq!(g.len(), self.fixed.len(), "boundary value count");
        let n = self.matrix.n;
        let mut full = vec![0.0; n];
        for (&i, &v) in self.fixed.iter().zip(g) {
            full[i] = v;
        }
        let kg = if g.iter().any(|&v| v != 0.0) {
            Some(self.matrix.mul_vec(&full))
        } else {
            None
        };
        let rhs: Vec<f64> = self
            .free
            .iter()
            .map(|&i| {
                let l = load.map_or(0.0, |b| b[i]);
                l - kg.as_ref().map_or(0.0, |k| k[i])
            })
            .collect();
        let x = self.solve_free(&rhs)?;
        for (&i, v) in self.free.iter().zip(x) {
            full[i] = v;
        }
        Ok(full)
    }
}

/// Solves `A u = b` on free nodes with `u = g` on `boundary`.
pub fn solve_dirichlet(
    a: &CsrMatrix,
    b: &[f64],
    boundary: &[usize],
    g: &[f64],
) -> Result<Vec<f64>> {
    DirichletSolver::new(a.clone(), boundary)?.solve(Some(b), g)
}

/// κ-harmonic extension of boundary data into a region.
pub fn harmonic_extension(
    region: &Region,
    coefficient: &[f64],
    boundary_values: &[f64],
) -> Result<Vec<f64>> {
    let k = assemble_stiffness(region, coefficient)?;
    DirichletSolver::new(k, &region.boundary_nodes())?.solve(None, boundary_values)
}

/// Homogeneous-Dirichlet solve on the whole domain for one coefficient field.
pub fn fine_solve(grid: &FineGrid, coefficient: &[f64], f: &Source) -> Result<Vec<f64>> {
    let region = grid.whole();
    let k = assemble_stiffness(&region, coefficient)?;
    let b = assemble_load(&region, f);
    let boundary = region.boundary_nodes();
    let zeros = vec![0.0; boundary.len()];
    DirichletSolver::new(k, &boundary)?.solve(Some(&b), &zeros)
}

/// Fine-grid reference solutions `u_h(·, ω_i)`, one per realization.
pub fn fine_reference_solve(ensemble: &PermeabilityEnsemble, f: &Source) -> Result<Vec<Vec<f64>>> {
    if ensemble.is_empty() {
        return Err(Error::Config("empty ensemble".into()));
    }
    let grid = ensemble.grid;
    ensemble
        .realizations
        .par_iter()
        .enumerate()
        .map(|(i, kappa)| {
            fine_solve(&grid, kappa, f).map_err(|e| e.tagged(format!("realization {i}")))
        })
        .collect()
}
