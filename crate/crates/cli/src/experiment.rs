//! Experiment configuration and the end-to-end pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cgmsfem::clustering::{
    assignments_csv, build_features, kmeans, ClusterPartition, KMeansOptions,
};
use cgmsfem::fem::{fine_reference_solve, Source};
use cgmsfem::fields::{
    generate_inclusion_medium, generate_logsine_medium, load_ensemble, InclusionMediumConfig,
    PermeabilityEnsemble,
};
use cgmsfem::grid::{build_grids, neighborhoods, CoarseGrid, Neighborhood, Region};
use cgmsfem::localreduce::{reduce_neighborhood, LocalReduceConfig, NeighborhoodReduction};
use cgmsfem::offline::{
    assemble_offline_space, build_offline_bases, BasisSelection, OfflineBasis, OfflineConfig,
    RandomizedSnapshots,
};
use cgmsfem::online::{enrich, trace_csv, OnlineConfig, TraceRow};
use cgmsfem::rng::derive_seed;
use cgmsfem::solver::{
    compute_errors, default_error_subset, relative_energy_error, solve, ErrorReport, SolveMode,
    ERROR_CSV_HEADER,
};
use cgmsfem::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    /// Coarse cells per axis.
    pub cnx: usize,
    pub cny: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MediumSpec {
    Inclusion(InclusionMediumConfig),
    Logsine { seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Constant { value: f64 },
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec::Constant { value: 1.0 }
    }
}

impl SourceSpec {
    pub fn to_source(&self) -> Source {
        match *self {
            SourceSpec::Constant { value } => Source::Constant(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineRunConfig {
    /// Cluster count of the enriched run.
    pub clusters: usize,
    /// Offline basis count to start from.
    pub start_basis: usize,
    pub mode: SolveMode,
    #[serde(flatten)]
    pub online: OnlineConfig,
}

impl Default for OnlineRunConfig {
    fn default() -> Self {
        Self {
            clusters: 1,
            start_basis: 3,
            mode: SolveMode::PerRealization,
            online: OnlineConfig::default(),
        }
    }
}

fn default_clusters() -> Vec<usize> {
    vec![1]
}

fn default_basis() -> Vec<usize> {
    vec![1, 3, 5]
}

fn default_modes() -> Vec<SolveMode> {
    vec![SolveMode::PerRealization]
}

fn default_subset_size() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub grid: GridConfig,
    pub medium: MediumSpec,
    /// Number of realizations `M` (ignored for file media).
    pub realizations: usize,
    #[serde(default)]
    pub source: SourceSpec,
    #[serde(default = "default_clusters")]
    pub clusters: Vec<usize>,
    /// Per-neighborhood cluster count overriding `clusters`.
    #[serde(default)]
    pub cluster_overrides: BTreeMap<usize, usize>,
    #[serde(default = "default_basis")]
    pub basis_counts: Vec<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<SolveMode>,
    /// Size of the error subset `S` (first realizations).
    #[serde(default = "default_subset_size")]
    pub error_subset_size: usize,
    #[serde(default)]
    pub localreduce: LocalReduceConfig,
    #[serde(default)]
    pub kmeans: KMeansOptions,
    #[serde(default)]
    pub kmeans_seed: u64,
    #[serde(default)]
    pub randomized_snapshots: Option<RandomizedSnapshots>,
    /// Keep eigenpairs below this value instead of fixed counts (capped by each count).
    #[serde(default)]
    pub eigenvalue_threshold: Option<f64>,
    #[serde(default)]
    pub online: Option<OnlineRunConfig>,
    /// Also report a per-realization GMsFEM reference on `S`.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub energy_error: bool,
    /// Directory for cached local reductions.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        match &mut self.medium {
            MediumSpec::Inclusion(c) => c.seed = derive_seed(seed, &[1]),
            MediumSpec::Logsine { seed: s } => *s = derive_seed(seed, &[2]),
            MediumSpec::File { .. } => {}
        }
        self.localreduce.seed = derive_seed(seed, &[3]);
        self.kmeans_seed = derive_seed(seed, &[4]);
        if let Some(r) = &mut self.randomized_snapshots {
            r.seed = derive_seed(seed, &[5]);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clusters.is_empty() || self.clusters.contains(&0) {
            return bad("cluster counts must be positive".into());
        }
        if self.basis_counts.is_empty() || self.basis_counts.contains(&0) {
            return bad("basis counts must be positive".into());
        }
        if self.modes.is_empty() {
            return bad("at least one solve mode is required".into());
        }
        if !matches!(self.medium, MediumSpec::File { .. }) && self.realizations == 0 {
            return bad("realizations must be positive".into());
        }
        if self.error_subset_size == 0 {
            return bad("error subset must be nonempty".into());
        }
        if self.cluster_overrides.values().any(|&j| j == 0) {
            return bad("cluster overrides must be positive".into());
        }
        if let Some(t) = self.eigenvalue_threshold {
            if !(t >= 0.0) {
                return bad(format!("eigenvalue threshold {t} must be nonnegative"));
            }
        }
        if let MediumSpec::Inclusion(c) = &self.medium {
            c.validate()?;
        }
        self.localreduce.validate()?;
        if let Some(o) = &self.online {
            o.online.validate()?;
            if o.clusters == 0 || o.start_basis == 0 {
                return bad("online clusters and start_basis must be positive".into());
            }
        }
        let (_, cg) = build_grids(self.grid.nx, self.grid.ny, self.grid.cnx, self.grid.cny)?;
        let snap_dim = 2 * (2 * cg.rx + 2 * cg.ry);
        let max_basis = self
            .basis_counts
            .iter()
            .chain(self.online.as_ref().map(|o| &o.start_basis))
            .max()
            .copied()
            .unwrap_or(0);
        if max_basis > snap_dim {
            return bad(format!(
                "basis count {max_basis} exceeds the snapshot dimension {snap_dim}"
            ));
        }
        Ok(())
    }
}

/// One `(J, n_basis, mode)` cell of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub clusters: usize,
    pub n_basis: usize,
    pub mode: SolveMode,
    pub dim: usize,
    pub errors: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub clusters: usize,
    pub start_basis: usize,
    pub mode: SolveMode,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub neighborhood: usize,
    pub certified_k: usize,
    pub capped: bool,
    pub kl_modes: usize,
    pub retained_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config: serde_json::Value,
    pub realizations: usize,
    pub error_subset: Vec<usize>,
    pub rows: Vec<ResultRow>,
    /// Per-realization GMsFEM reference on `S`, keyed by basis count.
    pub oracle: Vec<ResultRow>,
    pub online: Option<OnlineReport>,
    pub reduction: Vec<ReductionSummary>,
    pub timings: Vec<StageTime>,
}

impl RunReport {
    pub fn row(&self, clusters: usize, n_basis: usize, mode: SolveMode) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.clusters == clusters && r.n_basis == n_basis && r.mode == mode)
    }

    pub fn errors_csv(&self) -> String {
        let mut out = format!("{ERROR_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.errors.csv_row(r.clusters, r.n_basis, r.mode));
            out.push('\n');
        }
        out
    }

    pub fn online_trace_csv(&self) -> String {
        trace_csv(self.online.as_ref().map_or(&[][..], |o| &o.trace))
    }
}

struct Timer {
    stages: Vec<StageTime>,
}

impl Timer {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        let seconds = t.elapsed().as_secs_f64();
        log::info!("{stage}: {seconds:.2} s");
        self.stages.push(StageTime {
            stage: stage.to_string(),
            seconds,
        });
        Ok(out)
    }
}

pub fn build_ensemble(cfg: &ExperimentConfig) -> Result<PermeabilityEnsemble> {
    let (fine, _) = build_grids(cfg.grid.nx, cfg.grid.ny, cfg.grid.cnx, cfg.grid.cny)?;
    match &cfg.medium {
        MediumSpec::Inclusion(c) => generate_inclusion_medium(c, fine, cfg.realizations),
        MediumSpec::Logsine { seed } => generate_logsine_medium(fine, *seed, cfg.realizations),
        MediumSpec::File { path } => {
            let ens = load_ensemble(path)?;
            if ens.grid != fine {
                return Err(Error::Mismatch(format!(
                    "ensemble grid {}x{} differs from configured {}x{}",
                    ens.grid.nx, ens.grid.ny, fine.nx, fine.ny
                )));
            }
            Ok(ens)
        }
    }
}

fn cache_key(cfg: &ExperimentConfig, ens: &PermeabilityEnsemble) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg.localreduce)?);
    h.update(serde_json::to_vec(&cfg.grid)?);
    h.update(serde_json::to_vec(&cfg.source)?);
    for r in &ens.realizations {
        for v in r {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Local reductions of every neighborhood, read from or written to the cache.
pub fn reduce_all(
    cfg: &ExperimentConfig,
    nbhds: &[Neighborhood],
    ens: &PermeabilityEnsemble,
    source: &Source,
) -> Result<Vec<NeighborhoodReduction>> {
    log::info!(
        "local snapshots use {} right-hand side",
        if cfg.localreduce.include_source {
            "the source as"
        } else {
            "a zero"
        }
    );
    let cache_file = match &cfg.cache_dir {
        Some(dir) => Some(dir.join(format!("reduction_{}.json", cache_key(cfg, ens)?))),
        None => None,
    };
    if let Some(path) = &cache_file {
        if path.exists() {
            let text = std::fs::read(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let cached: Vec<NeighborhoodReduction> = serde_json::from_slice(&text)?;
            if cached.len() == nbhds.len() {
                log::info!("loaded local reductions from {}", path.display());
                return Ok(cached);
            }
        }
    }
    let reductions = nbhds
        .par_iter()
        .map(|n| reduce_neighborhood(n, ens, &cfg.localreduce, source))
        .collect::<Result<Vec<_>>>()?;
    if let Some(path) = &cache_file {
        let dir = path.parent().expect("cache file has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, serde_json::to_vec(&reductions)?).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok(reductions)
}

/// Cluster partitions for a global cluster count (with per-neighborhood overrides).
pub fn cluster_all(
    cfg: &ExperimentConfig,
    clusters: usize,
    nbhds: &[Neighborhood],
    ens: &PermeabilityEnsemble,
    reductions: Option<&[NeighborhoodReduction]>,
) -> Result<Vec<ClusterPartition>> {
    nbhds
        .par_iter()
        .map(|n| {
            let j = cfg
                .cluster_overrides
                .get(&n.id)
                .copied()
                .unwrap_or(clusters)
                .min(ens.len());
            let labels = if j <= 1 {
                vec![0; ens.len()]
            } else {
                let red = reductions
                    .ok_or_else(|| Error::Config("clustering needs local reductions".into()))?;
                let features = build_features(&red[n.id].reduced);
                kmeans(&features, j, cfg.kmeans_seed, cfg.kmeans)?.labels
            };
            ClusterPartition::from_labels(n.id, labels, ens, &n.region)
        })
        .collect()
}

fn needs_reduction(cfg: &ExperimentConfig, ens_len: usize) -> bool {
    let many = |j: usize| j > 1 && ens_len > 1;
    cfg.clusters.iter().any(|&j| many(j))
        || cfg.cluster_overrides.values().any(|&j| many(j))
        || cfg.online.as_ref().is_some_and(|o| many(o.clusters))
}

fn truncate_bases(bases: &[OfflineBasis], n: usize) -> Vec<OfflineBasis> {
    bases
        .iter()
        .map(|b| {
            let mut t = b.clone();
            t.fields.truncate(n);
            t.eigenfunctions.truncate(n);
            t
        })
        .collect()
}

fn offline_config(cfg: &ExperimentConfig, max_basis: usize) -> OfflineConfig {
    OfflineConfig {
        selection: match cfg.eigenvalue_threshold {
            None => BasisSelection::Fixed(max_basis),
            Some(t) => BasisSelection::Threshold {
                lambda_max: t,
                max: max_basis,
            },
        },
        randomized: cfg.randomized_snapshots.clone(),
    }
}

/// Per-realization GMsFEM errors on `S`: every realization gets its own basis.
pub fn oracle_errors(
    cg: &CoarseGrid,
    nbhds: &[Neighborhood],
    ens: &PermeabilityEnsemble,
    u_h: &[Vec<f64>],
    subset: &[usize],
    cfg: &ExperimentConfig,
) -> Result<Vec<ResultRow>> {
    let basis_counts = &cfg.basis_counts;
    let source = &cfg.source.to_source();
    let sub = ens.select(subset)?;
    let sub_uh: Vec<Vec<f64>> = subset.iter().map(|&s| u_h[s].clone()).collect();
    let labels: Vec<usize> = (0..sub.len()).collect();
    let parts = nbhds
        .iter()
        .map(|n| ClusterPartition::from_labels(n.id, labels.clone(), &sub, &n.region))
        .collect::<Result<Vec<_>>>()?;
    let max_basis = *basis_counts.iter().max().expect("nonempty");
    let bases = build_offline_bases(cg, nbhds, &parts, &offline_config(cfg, max_basis))?;
    let regions: Vec<Region> = nbhds.iter().map(|n| n.region).collect();
    let all: Vec<usize> = (0..sub.len()).collect();
    basis_counts
        .iter()
        .map(|&nb| {
            let space = assemble_offline_space(&truncate_bases(&bases, nb), &parts, &regions)?;
            let sol = solve(&space, &sub, source, SolveMode::PerRealization)?;
            let mut weights_ens = sub.clone();
            weights_ens.weights = vec![1.0 / sub.len() as f64; sub.len()];
            let mut errors = compute_errors(&sub_uh, &sol.fields, &weights_ens, &all)?;
            errors.subset = subset.to_vec();
            Ok(ResultRow {
                clusters: sub.len(),
                n_basis: nb,
                mode: SolveMode::PerRealization,
                dim: space.dim(),
                errors,
            })
        })
        .collect()
}

/// Report plus the cluster-assignment CSV text per cluster count.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub assignments: BTreeMap<usize, String>,
}

/// Runs the whole pipeline in memory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut timer = Timer { stages: Vec::new() };
    let (_, cg) = build_grids(cfg.grid.nx, cfg.grid.ny, cfg.grid.cnx, cfg.grid.cny)?;
    let nbhds = neighborhoods(&cg);
    let source = cfg.source.to_source();
    let ens = timer.run("ensemble", || build_ensemble(cfg))?;
    let subset = default_error_subset(ens.len())
        .into_iter()
        .take(cfg.error_subset_size)
        .collect::<Vec<_>>();
    let u_h = timer.run("fine reference", || fine_reference_solve(&ens, &source))?;
    let reductions = if needs_reduction(cfg, ens.len()) {
        Some(timer.run("local reduction", || reduce_all(cfg, &nbhds, &ens, &source))?)
    } else {
        None
    };
    let reduction_summary = reductions
        .as_deref()
        .unwrap_or_default()
        .iter()
        .map(|r| ReductionSummary {
            neighborhood: r.neighborhood,
            certified_k: r.certified_k,
            capped: r.capped,
            kl_modes: r.kl.num_modes(),
            retained_energy: r.kl.retained_fraction(),
        })
        .collect();
    let regions: Vec<Region> = nbhds.iter().map(|n| n.region).collect();
    let max_basis = *cfg.basis_counts.iter().max().expect("validated");
    let mut rows = Vec::new();
    let mut partitions_by_j = BTreeMap::new();
    for &j in &cfg.clusters {
        let parts = timer.run(&format!("clustering J={j}"), || {
            cluster_all(cfg, j, &nbhds, &ens, reductions.as_deref())
        })?;
        let bases = timer.run(&format!("offline J={j}"), || {
            build_offline_bases(&cg, &nbhds, &parts, &offline_config(cfg, max_basis))
        })?;
        for &nb in &cfg.basis_counts {
            let space = assemble_offline_space(&truncate_bases(&bases, nb), &parts, &regions)?;
            for &mode in &cfg.modes {
                let sol = timer.run(&format!("solve J={j} n={nb} {}", mode.as_str()), || {
                    solve(&space, &ens, &source, mode)
                })?;
                let mut errors = compute_errors(&u_h, &sol.fields, &ens, &subset)?;
                if cfg.energy_error {
                    errors.rel_energy_s =
                        Some(relative_energy_error(&u_h, &sol.fields, &ens, &subset)?);
                }
                rows.push(ResultRow {
                    clusters: j,
                    n_basis: nb,
                    mode,
                    dim: space.dim(),
                    errors,
                });
            }
        }
        partitions_by_j.insert(j, parts);
    }
    let oracle = if cfg.oracle {
        timer.run("oracle", || {
            oracle_errors(&cg, &nbhds, &ens, &u_h, &subset, cfg)
        })?
    } else {
        Vec::new()
    };
    let online = match &cfg.online {
        None => None,
        Some(o) => Some(timer.run("online", || {
            let parts = match partitions_by_j.get(&o.clusters) {
                Some(p) => p.clone(),
                None => cluster_all(cfg, o.clusters, &nbhds, &ens, reductions.as_deref())?,
            };
            let bases =
                build_offline_bases(&cg, &nbhds, &parts, &offline_config(cfg, o.start_basis))?;
            let space = assemble_offline_space(&bases, &parts, &regions)?;
            let sol = solve(&space, &ens, &source, o.mode)?;
            let result = enrich(&space, sol, &ens, &u_h, &source, o.mode, &subset, &o.online)?;
            Ok(OnlineReport {
                clusters: o.clusters,
                start_basis: o.start_basis,
                mode: o.mode,
                trace: result.trace,
            })
        })?),
    };
    let assignments = partitions_by_j
        .iter()
        .map(|(j, p)| (*j, assignments_csv(p)))
        .collect::<BTreeMap<_, _>>();
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(cfg)?,
        realizations: ens.len(),
        error_subset: subset,
        rows,
        oracle,
        online,
        reduction: reduction_summary,
        timings: timer.stages,
    };
    Ok(RunOutput {
        report,
        assignments,
    })
}

/// Runs the pipeline and writes all output files into `out`.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    config_text: Option<&str>,
    out: &Path,
) -> Result<RunReport> {
    let RunOutput {
        mut report,
        assignments,
    } = run(cfg)?;
    if let Some(text) = config_text {
        report.config = serde_json::from_str(text)?;
    }
    write_outputs(&report, &assignments, out)?;
    Ok(report)
}

fn write_file(path: PathBuf, contents: &[u8]) -> Result<()> {
    std::fs::write(&path, contents).map_err(|e| Error::Io { path, source: e })
}

pub fn write_outputs(
    report: &RunReport,
    assignments: &BTreeMap<usize, String>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    write_file(out.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
    write_file(out.join("errors.csv"), report.errors_csv().as_bytes())?;
    write_file(
        out.join("online_trace.csv"),
        report.online_trace_csv().as_bytes(),
    )?;
    for (j, csv) in assignments {
        write_file(out.join(format!("clusters_J{j}.csv")), csv.as_bytes())?;
    }
    Ok(())
}

/// One flagged table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiff {
    pub clusters: usize,
    pub n_basis: usize,
    pub mode: SolveMode,
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDiff {
    pub cells: usize,
    pub flags: Vec<CellDiff>,
}

impl TableDiff {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} cells compared, {} flagged\n",
            self.cells,
            self.flags.len()
        );
        for f in &self.flags {
            writeln!(
                s,
                "J={} n_basis={} mode={} {}: {:.6e} vs {:.6e} ({:.2}%)",
                f.clusters,
                f.n_basis,
                f.mode.as_str(),
                f.metric,
                f.a,
                f.b,
                100.0 * f.relative
            )
            .expect("write to string");
        }
        s
    }
}

/// Relative per-cell differences of the normalized metrics; cells beyond `tol` are flagged.
pub fn compare_tables(a: &RunReport, b: &RunReport, tol: f64) -> Result<TableDiff> {
    let key = |r: &ResultRow| (r.clusters, r.n_basis, r.mode.as_str());
    let mut ka: Vec<_> = a.rows.iter().map(key).collect();
    let mut kb: Vec<_> = b.rows.iter().map(key).collect();
    ka.sort();
    kb.sort();
    if ka != kb {
        return Err(Error::Mismatch(
            "reports cover different experiment grids".into(),
        ));
    }
    let mut flags = Vec::new();
    for ra in &a.rows {
        let rb = b.row(ra.clusters, ra.n_basis, ra.mode).expect("same keys");
        let metrics = [
            ("e1_omega", ra.errors.rel_e1_omega, rb.errors.rel_e1_omega),
            ("e2_omega", ra.errors.rel_e2_omega, rb.errors.rel_e2_omega),
            ("e1_S", ra.errors.rel_e1_s, rb.errors.rel_e1_s),
            ("e2_S", ra.errors.rel_e2_s, rb.errors.rel_e2_s),
        ];
        for (name, x, y) in metrics {
            let scale = x.abs().max(y.abs());
            let rel = if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            };
            if rel > tol {
                flags.push(CellDiff {
                    clusters: ra.clusters,
                    n_basis: ra.n_basis,
                    mode: ra.mode,
                    metric: name.to_string(),
                    a: x,
                    b: y,
                    relative: rel,
                });
            }
        }
    }
    Ok(TableDiff {
        cells: a.rows.len() * 4,
        flags,
    })
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Mismatch(_) | Error::Ingestion { .. } | Error::Json(_) => 2,
        Error::Numerical { .. } => 3,
        Error::Io { .. } => 1,
    }
}
