//! Sparse storage, a banded Cholesky factorization for structured-grid systems,
//! and dense helpers built on nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Position of `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.col_idx[start..self.row_ptr[i + 1]]
            .binary_search(&j)
            .ok()
            .map(|p| start + p)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
        }
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| {
                let (cols, vals) = self.row(i);
                x[i] * cols.iter().zip(vals).map(|(&j, &v)| v * y[j]).sum::<f64>()
            })
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-norm of `A - Aᵀ`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                d[(i, j)] += v;
            }
        }
        d
    }

    /// Principal submatrix on `keep` (sorted ascending), renumbered `0..keep.len()`.
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            map[i] = k;
        }
        let mut row_ptr = Vec::with_capacity(keep.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for &i in keep {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if map[j] != usize::MAX {
                    col_idx.push(map[j]);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n: keep.len(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn half_bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).0.iter().map(move |&j| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }
}

/// Cholesky factor `A = L Lᵀ` of a symmetric positive definite banded matrix.
///
/// Row `i` of `L` is stored densely for columns `i - bw ..= i`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n;
        let bw = a.half_bandwidth();
        let stride = bw + 1;
        let mut l = vec![0.0; n * stride];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if j <= i {
                    l[i * stride + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(bw));
                let mut s = l[i * stride + (j + bw - i)];
                let ri = i * stride + bw - i;
                let rj = j * stride + bw - j;
                for k in k0..j {
                    s -= l[ri + k] * l[rj + k];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::numerical(
                            "banded Cholesky",
                            format!("non-positive pivot {s:.3e} at row {i} of {n}"),
                        ));
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw, stride) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let ri = i * stride + bw - i;
            let mut s = b[i];
            for k in lo..i {
                s -= self.l[ri + k] * b[k];
            }
            b[i] = s / self.l[ri + i];
        }
        for i in (0..n).rev() {
            let ri = i * stride + bw - i;
            b[i] /= self.l[ri + i];
            let bi = b[i];
            let lo = i.saturating_sub(bw);
            for k in lo..i {
                b[k] -= self.l[ri + k] * bi;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Result of a dense generalized symmetric eigensolve.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Ascending.
    pub values: Vec<f64>,
    /// Columns are `S`-orthonormal eigenvectors.
    pub vectors: DMatrix<f64>,
}

/// Solves `A v = λ S v` for symmetric `A` and symmetric positive definite `S`.
pub fn generalized_eig(a: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let n = a.nrows();
    if a.ncols() != n || s.nrows() != n || s.ncols() != n {
        return Err(Error::Mismatch(format!(
            "eigenproblem dimensions {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            s.nrows(),
            s.ncols()
        )));
    }
    if n == 0 {
        return Ok(EigenDecomposition {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let s_sym = (s + s.transpose()) * 0.5;
    let s_eigs = s_sym.clone().symmetric_eigenvalues();
    let s_min = s_eigs.min();
    let s_max = s_eigs.amax();
    if !(s_min > 1e-12 * s_max) {
        return Err(Error::numerical(
            "generalized eigensolver",
            format!(
                "mass-side matrix not positive definite: λ_min = {s_min:.3e}, λ_max = {s_max:.3e}, cond ≥ {:.3e}",
                s_max / s_min.abs().max(f64::MIN_POSITIVE)
            ),
        ));
    }
    let chol = s_sym
        .cholesky()
        .ok_or_else(|| Error::numerical("generalized eigensolver", "Cholesky of S failed"))?;
    let l = chol.l();
    // C = L⁻¹ A L⁻ᵀ
    let a_sym = (a + a.transpose()) * 0.5;
    let y = l
        .solve_lower_triangular(&a_sym)
        .expect("triangular factor is nonsingular");
    let c = l
        .solve_lower_triangular(&y.transpose())
        .expect("triangular factor is nonsingular");
    let c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut w = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        w.set_column(k, &eig.eigenvectors.column(i));
    }
    let vectors = l
        .transpose()
        .solve_upper_triangular(&w)
        .expect("triangular factor is nonsingular");
    Ok(EigenDecomposition { values, vectors })
}

/// Dense SPD solve; `None` when Cholesky breaks down.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tridiag(n: usize) -> CsrMatrix {
        let mut row_ptr = vec![0];
        let mut col_idx = vec![];
        let mut values = vec![];
        for i in 0..n {
            if i > 0 {
                col_idx.push(i - 1);
                values.push(-1.0);
            }
            col_idx.push(i);
            values.push(2.5);
            if i + 1 < n {
                col_idx.push(i + 1);
                values.push(-1.0);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    #[test]
    fn banded_cholesky_solves_tridiagonal() {
        let a = tridiag(50);
        let f = BandedCholesky::factor(&a).unwrap();
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let mut b = a.mul_vec(&x);
        f.solve_in_place(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn banded_cholesky_rejects_indefinite() {
        let mut a = tridiag(5);
        let p = a.position(2, 2).unwrap();
        a.values[p] = -1.0;
        assert!(BandedCholesky::factor(&a).is_err());
    }

    #[test]
    fn eig_identity_pair() {
        let i = DMatrix::<f64>::identity(4, 4);
        let e = generalized_eig(&i, &i).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn eig_diagonal_sorted() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let e = generalized_eig(&a, &DMatrix::identity(2, 2)).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14 && (e.values[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn eig_rejects_singular_mass() {
        let a = DMatrix::<f64>::identity(3, 3);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        let err = generalized_eig(&a, &s).unwrap_err();
        assert!(err.to_string().contains("not positive definite"));
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng, shift: f64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &g * g.transpose() + DMatrix::identity(n, n) * shift
    }

    /// Shifted inverse iteration from a perturbed start: converges to the pair
    /// nearest the shift independently of the Cholesky/eigen route.
    fn inverse_iteration(a: &DMatrix<f64>, s: &DMatrix<f64>, shift: f64) -> (f64, DVector<f64>) {
        let n = a.nrows();
        let shifted = a - s * shift;
        let lu = shifted.lu();
        let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
        let mut lambda = shift;
        for _ in 0..200 {
            let w = lu.solve(&(s * &v)).unwrap();
            let nrm = (w.transpose() * s * &w)[(0, 0)].sqrt();
            v = w / nrm;
            lambda = (v.transpose() * a * &v)[(0, 0)];
        }
        (lambda, v)
    }

    #[test]
    fn eig_random_pair_matches_inverse_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_spd(20, &mut rng, 0.1);
        let s = random_spd(20, &mut rng, 1.0);
        let e = generalized_eig(&a, &s).unwrap();
        let a_norm = a.norm();
        let s_norm = s.norm();
        for k in 0..20 {
            let v = e.vectors.column(k);
            let r = &a * v - &s * v * e.values[k];
            assert!(r.norm() <= 1e-8 * (a_norm + e.values[k].abs() * s_norm));
            if k > 0 {
                assert!(e.values[k] >= e.values[k - 1]);
            }
        }
        let gram = e.vectors.transpose() * &s * &e.vectors;
        assert!((gram - DMatrix::identity(20, 20)).amax() < 1e-10);
        for &k in &[0usize, 7, 19] {
            let gap = if k + 1 < 20 {
                e.values[k + 1] - e.values[k]
            } else {
                1.0
            };
            let shift = e.values[k]
                - 0.1
                    * gap.min(if k > 0 {
                        e.values[k] - e.values[k - 1]
                    } else {
                        gap
                    });
            let (lambda, v) = inverse_iteration(&a, &s, shift);
            assert!((lambda - e.values[k]).abs() < 1e-9 * e.values[k].abs().max(1.0));
            let align = (v.transpose() * &s * e.vectors.column(k))[(0, 0)].abs();
            assert!((align - 1.0).abs() < 1e-8);
        }
    }
}
