//! Offline multiscale space: delta-boundary snapshots on cluster-mean
//! coefficients, the local spectral problem, and the global column layout.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterPartition;
use crate::error::{Error, Result};
use crate::fem::{assemble_mass, assemble_stiffness, DirichletSolver};
use crate::grid::{oversample, CoarseGrid, Hat, Neighborhood, Region};
use crate::linalg::generalized_eig;
use crate::localreduce::{certify_range, sample_random_boundary, HarmonicExtensionOperator};
use crate::rng;

/// Snapshot functions of one `(i, j)` pair, nodal on `D_i`, one per column.
#[derive(Debug, Clone)]
pub struct OfflineSnapshotSpace {
    pub neighborhood: usize,
    pub cluster: usize,
    pub region: Region,
    pub coefficient: Vec<f64>,
    /// `region.num_nodes() × n_snap`.
    pub snapshots: DMatrix<f64>,
}

impl OfflineSnapshotSpace {
    pub fn dim(&self) -> usize {
        self.snapshots.ncols()
    }
}

/// Harmonic extensions of every fine boundary delta of `D_i`.
pub fn build_snapshot_space(
    nbhd: &Neighborhood,
    cluster: usize,
    kappa_bar: &[f64],
) -> Result<OfflineSnapshotSpace> {
    let tag = |e: Error| e.tagged(format!("offline snapshots (i={}, j={cluster})", nbhd.id));
    let region = nbhd.region;
    let stiff = assemble_stiffness(&region, kappa_bar).map_err(tag)?;
    let solver = DirichletSolver::new(stiff, &nbhd.boundary_nodes).map_err(tag)?;
    let nb = nbhd.boundary_nodes.len();
    let mut snapshots = DMatrix::zeros(region.num_nodes(), nb);
    let mut delta = vec![0.0; nb];
    for k in 0..nb {
        delta[k] = 1.0;
        let psi = solver.solve(None, &delta).map_err(|e| {
            e.tagged(format!(
                "offline snapshot (i={}, j={cluster}, k={k})",
                nbhd.id
            ))
        })?;
        delta[k] = 0.0;
        snapshots.set_column(k, &nalgebra::DVector::from_vec(psi));
    }
    Ok(OfflineSnapshotSpace {
        neighborhood: nbhd.id,
        cluster,
        region,
        coefficient: kappa_bar.to_vec(),
        snapshots,
    })
}

/// Settings of the optional randomized snapshot space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizedSnapshots {
    pub eps: f64,
    pub alpha: f64,
    pub k_probe: usize,
    pub seed: u64,
}

impl Default for RandomizedSnapshots {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            alpha: 10.0,
            k_probe: 5,
            seed: 29,
        }
    }
}

/// Harmonic extensions of certified random boundary data on `D_i`.
pub fn build_randomized_snapshot_space(
    nbhd: &Neighborhood,
    cluster: usize,
    kappa_bar: &[f64],
    opts: &RandomizedSnapshots,
) -> Result<OfflineSnapshotSpace> {
    let over = oversample(nbhd, 0);
    let mut global = vec![1.0; nbhd.region.grid.num_cells()];
    for c in 0..nbhd.region.num_cells() {
        global[nbhd.region.global_cell(c)] = kappa_bar[c];
    }
    let op = HarmonicExtensionOperator::new(&over, &global)?;
    let nb = nbhd.boundary_nodes.len();
    let seed = rng::derive_seed(opts.seed, &[cluster as u64]);
    let cert = certify_range(
        &op,
        |j| sample_random_boundary(nb, seed, nbhd.id, j),
        |k, p| sample_random_boundary(nb, seed ^ 0x5bd1_e995, nbhd.id, 1_000_000 + 64 * k + p),
        1,
        opts.eps,
        opts.alpha,
        opts.k_probe,
        nb,
    )?;
    let mut snapshots = DMatrix::zeros(nbhd.region.num_nodes(), cert.basis.columns.len());
    for (c, q) in cert.basis.columns.iter().enumerate() {
        snapshots.set_column(c, &nalgebra::DVector::from_column_slice(q));
    }
    Ok(OfflineSnapshotSpace {
        neighborhood: nbhd.id,
        cluster,
        region: nbhd.region,
        coefficient: kappa_bar.to_vec(),
        snapshots,
    })
}

/// How many eigenfunctions each `(i, j)` keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSelection {
    Fixed(usize),
    /// Keep eigenpairs with `λ ≤ lambda_max`, at least one and at most `max`.
    Threshold {
        lambda_max: f64,
        max: usize,
    },
}

impl BasisSelection {
    fn count(&self, eigenvalues: &[f64]) -> usize {
        match *self {
            BasisSelection::Fixed(m) => m,
            BasisSelection::Threshold { lambda_max, max } => eigenvalues
                .iter()
                .take_while(|&&l| l <= lambda_max)
                .count()
                .clamp(1, max.max(1)),
        }
    }
}

/// Eigenpairs of one `(i, j)` and the retained multiscale fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineBasis {
    pub neighborhood: usize,
    pub cluster: usize,
    /// All eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Retained eigenfunctions `φ_k` nodal on `D_i`.
    pub eigenfunctions: Vec<Vec<f64>>,
    /// `χ_i · φ_k` nodal on `D_i`.
    pub fields: Vec<Vec<f64>>,
}

impl OfflineBasis {
    pub fn count(&self) -> usize {
        self.fields.len()
    }
}

/// `|∇χ_i|²` at the fine-cell centers of `D_i`.
pub fn hat_gradient_weights(hat: &Hat, region: &Region) -> Vec<f64> {
    (0..region.num_cells())
        .map(|c| {
            let (x, y) = region.cell_center(c);
            hat.grad_sq(x, y)
        })
        .collect()
}

/// Solves the local spectral problem in the snapshot space and keeps the
/// smallest eigenpairs.
pub fn spectral_decompose(
    snap: &OfflineSnapshotSpace,
    hat: &Hat,
    chi: &[f64],
    selection: BasisSelection,
) -> Result<OfflineBasis> {
    let tag = |e: Error| {
        e.tagged(format!(
            "spectral problem (i={}, j={})",
            snap.neighborhood, snap.cluster
        ))
    };
    let region = &snap.region;
    let stiff = assemble_stiffness(region, &snap.coefficient).map_err(tag)?;
    let weights: Vec<f64> = hat_gradient_weights(hat, region)
        .iter()
        .zip(&snap.coefficient)
        .map(|(g, k)| g * k)
        .collect();
    let mass = assemble_mass(region, &weights);
    let psi = &snap.snapshots;
    let n = psi.ncols();
    let mut kpsi = DMatrix::zeros(psi.nrows(), n);
    let mut mpsi = DMatrix::zeros(psi.nrows(), n);
    for c in 0..n {
        let col = psi.column(c);
        kpsi.set_column(
            c,
            &nalgebra::DVector::from_vec(stiff.mul_vec(col.as_slice())),
        );
        mpsi.set_column(
            c,
            &nalgebra::DVector::from_vec(mass.mul_vec(col.as_slice())),
        );
    }
    let a = psi.transpose() * kpsi;
    let s = psi.transpose() * mpsi;
    let eig = generalized_eig(&a, &s).map_err(tag)?;
    let m = selection.count(&eig.values);
    if m > n {
        return Err(Error::Config(format!(
            "{m} basis functions requested but the snapshot space of (i={}, j={}) has dimension {n}",
            snap.neighborhood, snap.cluster
        )));
    }
    let mut eigenfunctions = Vec::with_capacity(m);
    let mut fields = Vec::with_capacity(m);
    for k in 0..m {
        let phi = psi * eig.vectors.column(k);
        fields.push(phi.iter().zip(chi).map(|(p, c)| p * c).collect());
        eigenfunctions.push(phi.as_slice().to_vec());
    }
    Ok(OfflineBasis {
        neighborhood: snap.neighborhood,
        cluster: snap.cluster,
        eigenvalues: eig.values,
        eigenfunctions,
        fields,
    })
}

/// Where a column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Offline { index: usize },
    Online { round: usize, source: usize },
}

/// One global basis function, supported in `D_i` and active for the
/// realizations of cluster `j` (optionally a single realization only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisColumn {
    pub neighborhood: usize,
    pub cluster: usize,
    pub kind: ColumnKind,
    /// Restricts the column to one realization.
    pub realization: Option<usize>,
    /// Nodal values on `D_i`.
    pub values: Vec<f64>,
}

/// Global offline (and later online) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSpace {
    pub regions: Vec<Region>,
    /// `labels[i][ω]`: cluster of realization `ω` in neighborhood `i`.
    pub labels: Vec<Vec<usize>>,
    pub columns: Vec<BasisColumn>,
}

impl OfflineSpace {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn num_realizations(&self) -> usize {
        self.labels.first().map_or(0, |l| l.len())
    }

    pub fn is_active(&self, col: usize, omega: usize) -> bool {
        let c = &self.columns[col];
        self.labels[c.neighborhood][omega] == c.cluster && c.realization.is_none_or(|r| r == omega)
    }

    /// Columns active for realization `ω`, ascending.
    pub fn active_columns(&self, omega: usize) -> Vec<usize> {
        (0..self.dim())
            .filter(|&c| self.is_active(c, omega))
            .collect()
    }

    /// `(i, j, k)` of every offline column.
    pub fn index_map(&self) -> BTreeMap<(usize, usize, usize), usize> {
        self.columns
            .iter()
            .enumerate()
            .filter_map(|(p, c)| match c.kind {
                ColumnKind::Offline { index } => Some(((c.neighborhood, c.cluster, index), p)),
                ColumnKind::Online { .. } => None,
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let space: Self = serde_json::from_reader(std::io::BufReader::new(file))?;
        space.check()?;
        Ok(space)
    }

    fn check(&self) -> Result<()> {
        if self.labels.len() != self.regions.len() {
            return Err(Error::Mismatch(
                "offline space: one label row per neighborhood expected".into(),
            ));
        }
        for (p, c) in self.columns.iter().enumerate() {
            let region = self.regions.get(c.neighborhood).ok_or_else(|| {
                Error::Mismatch(format!(
                    "column {p}: unknown neighborhood {}",
                    c.neighborhood
                ))
            })?;
            if c.values.len() != region.num_nodes() {
                return Err(Error::Mismatch(format!(
                    "column {p}: wrong number of nodal values"
                )));
            }
        }
        Ok(())
    }
}

/// Collects bases into the global space; one basis per `(i, j)` is required.
pub fn assemble_offline_space(
    bases: &[OfflineBasis],
    partitions: &[ClusterPartition],
    regions: &[Region],
) -> Result<OfflineSpace> {
    if partitions.len() != regions.len() {
        return Err(Error::Mismatch(format!(
            "{} partitions for {} neighborhoods",
            partitions.len(),
            regions.len()
        )));
    }
    let mut seen = HashSet::new();
    for b in bases {
        if !seen.insert((b.neighborhood, b.cluster)) {
            return Err(Error::Mismatch(format!(
                "duplicate offline basis for (i={}, j={})",
                b.neighborhood, b.cluster
            )));
        }
    }
    for p in partitions {
        for j in 0..p.num_clusters() {
            if !seen.contains(&(p.neighborhood, j)) {
                return Err(Error::Mismatch(format!(
                    "missing offline basis for (i={}, j={j})",
                    p.neighborhood
                )));
            }
        }
    }
    let mut ordered: Vec<&OfflineBasis> = bases.iter().collect();
    ordered.sort_by_key(|b| (b.neighborhood, b.cluster));
    let columns = ordered
        .iter()
        .flat_map(|b| {
            b.fields.iter().enumerate().map(|(k, f)| BasisColumn {
                neighborhood: b.neighborhood,
                cluster: b.cluster,
                kind: ColumnKind::Offline { index: k },
                realization: None,
                values: f.clone(),
            })
        })
        .collect();
    let mut labels = vec![Vec::new(); regions.len()];
    for p in partitions {
        labels[p.neighborhood] = p.labels.clone();
    }
    Ok(OfflineSpace {
        regions: regions.to_vec(),
        labels,
        columns,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    pub selection: BasisSelection,
    /// Randomized snapshot spaces instead of full delta-boundary ones.
    pub randomized: Option<RandomizedSnapshots>,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            selection: BasisSelection::Fixed(3),
            randomized: None,
        }
    }
}

/// Eigen-decompositions for every `(i, j)`, computed in parallel.
pub fn build_offline_bases(
    cg: &CoarseGrid,
    nbhds: &[Neighborhood],
    partitions: &[ClusterPartition],
    cfg: &OfflineConfig,
) -> Result<Vec<OfflineBasis>> {
    let jobs: Vec<(usize, usize)> = partitions
        .iter()
        .flat_map(|p| (0..p.num_clusters()).map(move |j| (p.neighborhood, j)))
        .collect();
    jobs.par_iter()
        .map(|&(i, j)| {
            let nbhd = &nbhds[i];
            let kappa_bar = &partitions[i].mean_fields[j];
            let snap = match &cfg.randomized {
                None => build_snapshot_space(nbhd, j, kappa_bar)?,
                Some(r) => build_randomized_snapshot_space(nbhd, j, kappa_bar, r)?,
            };
            let hat = Hat::new(cg, i);
            let chi: Vec<f64> = (0..nbhd.region.num_nodes())
                .map(|l| {
                    let (x, y) = nbhd.region.node_coords(l);
                    hat.value(x, y)
                })
                .collect();
            spectral_decompose(&snap, &hat, &chi, cfg.selection)
        })
        .collect()
}

/// Builds the global offline space from cluster partitions.
pub fn build_offline_space(
    cg: &CoarseGrid,
    nbhds: &[Neighborhood],
    partitions: &[ClusterPartition],
    cfg: &OfflineConfig,
) -> Result<OfflineSpace> {
    let bases = build_offline_bases(cg, nbhds, partitions, cfg)?;
    let regions: Vec<Region> = nbhds.iter().map(|n| n.region).collect();
    assemble_offline_space(&bases, partitions, &regions)
}
