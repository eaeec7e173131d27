//! Residual-driven online enrichment of the coarse space.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{assemble_load, assemble_stiffness, DirichletSolver, Source};
use crate::fields::PermeabilityEnsemble;
use crate::grid::Region;
use crate::linalg::{dot, norm2};
use crate::offline::{BasisColumn, ColumnKind, OfflineSpace};
use crate::solver::{compute_errors, solve, CoarseSolution, ErrorReport, SolveMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// One online basis per `(i, j)`: the member with the largest residual.
    #[default]
    PerClusterMax,
    /// The largest `θ` fraction of all residuals.
    TopFraction(f64),
}

/// Support of a new online column in realization space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OnlineScope {
    /// Active for the whole cluster `Ω_j^i`.
    #[default]
    Cluster,
    /// Active only for the realization whose residual produced it.
    Realization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    #[default]
    L2,
    /// `sqrt(r · K⁻¹ r)` with the local stiffness of the residual's realization.
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub rounds: usize,
    pub selection: Selection,
    pub scope: OnlineScope,
    pub norm: ResidualNorm,
    /// Realizations eligible for enrichment; `None` means all.
    pub candidates: Option<Vec<usize>>,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            selection: Selection::PerClusterMax,
            scope: OnlineScope::Cluster,
            norm: ResidualNorm::L2,
            candidates: None,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Selection::TopFraction(t) = self.selection {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("top fraction {t} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Residual `l(ω; v) − a(ω; u_ms, v)` on the interior nodes of `D_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub neighborhood: usize,
    pub cluster: usize,
    pub realization: usize,
    /// Indexed like `interior` (local ids in `D_i`).
    pub values: Vec<f64>,
    pub interior: Vec<usize>,
    pub norm: f64,
}

/// Local operator of one `(D_i, ω)` pair.
pub struct LocalProblem {
    region: Region,
    solver: DirichletSolver,
}

impl LocalProblem {
    pub fn new(region: Region, kappa: &[f64]) -> Result<Self> {
        let k = assemble_stiffness(&region, &region.restrict_cells(kappa))?;
        let solver = DirichletSolver::new(k, &region.boundary_nodes())?;
        Ok(Self { region, solver })
    }

    pub fn interior(&self) -> &[usize] {
        self.solver.free_nodes()
    }

    /// Residual vector over the interior nodes; `load` is the global load vector.
    pub fn residual(&self, u_ms: &[f64], load: &[f64]) -> Vec<f64> {
        let local: Vec<f64> = (0..self.region.num_nodes())
            .map(|l| u_ms[self.region.global_node(l)])
            .collect();
        let ku = self.solver.matrix().mul_vec(&local);
        self.interior()
            .iter()
            .map(|&l| load[self.region.global_node(l)] - ku[l])
            .collect()
    }

    /// `a(v, v)` with the local stiffness.
    pub fn matrix_energy(&self, v: &[f64]) -> f64 {
        self.solver.matrix().bilinear(v, v)
    }

    /// Field on `D_i` with zero boundary values solving `a(φ, v) = r(v)`.
    pub fn riesz(&self, r: &[f64]) -> Result<Vec<f64>> {
        let x = self.solver.solve_free(r)?;
        let mut full = vec![0.0; self.region.num_nodes()];
        for (&l, v) in self.interior().iter().zip(x) {
            full[l] = v;
        }
        Ok(full)
    }
}

pub fn compute_residual(
    space: &OfflineSpace,
    neighborhood: usize,
    omega: usize,
    u_ms: &[f64],
    ensemble: &PermeabilityEnsemble,
    f: &Source,
) -> Result<ResidualRecord> {
    let region = space.regions[neighborhood];
    let problem = LocalProblem::new(region, &ensemble.realizations[omega])?;
    let load = assemble_load(&ensemble.grid.whole(), f);
    let values = problem.residual(u_ms, &load);
    Ok(ResidualRecord {
        neighborhood,
        cluster: space.labels[neighborhood][omega],
        realization: omega,
        norm: norm2(&values),
        interior: problem.interior().to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineBasis {
    pub neighborhood: usize,
    pub cluster: usize,
    pub realization: usize,
    pub round: usize,
    /// Nodal values on `D_i`, zero on `∂D_i`.
    pub values: Vec<f64>,
}

/// Local Riesz solve for a residual; `None` for a zero residual.
pub fn solve_online_basis(
    rec: &ResidualRecord,
    space: &OfflineSpace,
    ensemble: &PermeabilityEnsemble,
    round: usize,
) -> Result<Option<OnlineBasis>> {
    if rec.values.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let region = space.regions[rec.neighborhood];
    let problem = LocalProblem::new(region, &ensemble.realizations[rec.realization])?;
    let values = problem.riesz(&rec.values).map_err(|e| {
        e.tagged(format!(
            "online basis (i={}, ω={})",
            rec.neighborhood, rec.realization
        ))
    })?;
    Ok(Some(OnlineBasis {
        neighborhood: rec.neighborhood,
        cluster: rec.cluster,
        realization: rec.realization,
        round,
        values,
    }))
}

/// One row of the convergence history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub dofs: usize,
    pub added: usize,
    pub errors: ErrorReport,
}

pub const TRACE_CSV_HEADER: &str = "round,dofs,e1_S,e2_S";

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_CSV_HEADER}\n");
    for t in trace {
        writeln!(
            out,
            "{},{},{:.10e},{:.10e}",
            t.round, t.dofs, t.errors.rel_e1_s, t.errors.rel_e2_s
        )
        .expect("write to string");
    }
    out
}

struct Candidate {
    rec: ResidualRecord,
    riesz: Option<Vec<f64>>,
    score: f64,
}

fn rank(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.rec.neighborhood.cmp(&b.rec.neighborhood))
        .then(a.rec.realization.cmp(&b.rec.realization))
}

/// Result of the enrichment loop.
#[derive(Debug, Clone)]
pub struct Enrichment {
    pub space: OfflineSpace,
    pub solution: CoarseSolution,
    pub trace: Vec<TraceRow>,
}

/// Runs `cfg.rounds` rounds of residual-based enrichment starting from `solution`.
#[allow(clippy::too_many_arguments)]
pub fn enrich(
    space: &OfflineSpace,
    solution: CoarseSolution,
    ensemble: &PermeabilityEnsemble,
    u_h: &[Vec<f64>],
    f: &Source,
    mode: SolveMode,
    subset: &[usize],
    cfg: &OnlineConfig,
) -> Result<Enrichment> {
    cfg.validate()?;
    let mut space = space.clone();
    let mut solution = solution;
    let load = assemble_load(&ensemble.grid.whole(), f);
    let candidates: Vec<usize> = cfg
        .candidates
        .clone()
        .unwrap_or_else(|| (0..ensemble.len()).collect());
    let mut trace = vec![TraceRow {
        round: 0,
        dofs: space.dim(),
        added: 0,
        errors: compute_errors(u_h, &solution.fields, ensemble, subset)?,
    }];
    for round in 1..=cfg.rounds {
        let pairs: Vec<(usize, usize)> = (0..space.regions.len())
            .flat_map(|i| candidates.iter().map(move |&w| (i, w)))
            .collect();
        let scored = pairs
            .par_iter()
            .map(|&(i, w)| -> Result<Candidate> {
                let region = space.regions[i];
                let problem = LocalProblem::new(region, &ensemble.realizations[w])
                    .map_err(|e| e.tagged(format!("online residual (i={i}, ω={w})")))?;
                let values = problem.residual(&solution.fields[w], &load);
                let l2 = norm2(&values);
                let (score, riesz) = match cfg.norm {
                    ResidualNorm::L2 => (l2, None),
                    ResidualNorm::Dual if l2 > 0.0 => {
                        let phi = problem.riesz(&values)?;
                        let interior = problem.interior();
                        let r_phi: f64 = dot(
                            &values,
                            &interior.iter().map(|&l| phi[l]).collect::<Vec<_>>(),
                        );
                        (r_phi.max(0.0).sqrt(), Some(phi))
                    }
                    ResidualNorm::Dual => (0.0, None),
                };
                Ok(Candidate {
                    rec: ResidualRecord {
                        neighborhood: i,
                        cluster: space.labels[i][w],
                        realization: w,
                        interior: problem.interior().to_vec(),
                        values,
                        norm: score,
                    },
                    riesz,
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut picked: Vec<&Candidate> = match cfg.selection {
            Selection::PerClusterMax => {
                let mut best: std::collections::BTreeMap<(usize, usize), &Candidate> =
                    Default::default();
                for c in &scored {
                    let key = (c.rec.neighborhood, c.rec.cluster);
                    match best.get(&key) {
                        Some(b) if rank(b, c) != std::cmp::Ordering::Greater => {}
                        _ => {
                            best.insert(key, c);
                        }
                    }
                }
                best.into_values().collect()
            }
            Selection::TopFraction(theta) => {
                let mut all: Vec<&Candidate> = scored.iter().collect();
                all.sort_by(|a, b| rank(a, b));
                let take = ((theta * all.len() as f64).ceil() as usize).min(all.len());
                all.truncate(take);
                all
            }
        };
        picked.retain(|c| c.score > 0.0);
        picked.sort_by_key(|c| (c.rec.neighborhood, c.rec.cluster, c.rec.realization));
        let new_bases = picked
            .par_iter()
            .map(|c| match &c.riesz {
                Some(phi) => Ok(Some(OnlineBasis {
                    neighborhood: c.rec.neighborhood,
                    cluster: c.rec.cluster,
                    realization: c.rec.realization,
                    round,
                    values: phi.clone(),
                })),
                None => solve_online_basis(&c.rec, &space, ensemble, round),
            })
            .collect::<Result<Vec<_>>>()?;
        let mut added = 0;
        for b in new_bases.into_iter().flatten() {
            space.columns.push(BasisColumn {
                neighborhood: b.neighborhood,
                cluster: b.cluster,
                kind: ColumnKind::Online {
                    round,
                    source: b.realization,
                },
                realization: (cfg.scope == OnlineScope::Realization).then_some(b.realization),
                values: b.values,
            });
            added += 1;
        }
        if added > 0 {
            solution = solve(&space, ensemble, f, mode)
                .map_err(|e| e.tagged(format!("online round {round}")))?;
        }
        log::info!(
            "online round {round}: {added} bases added, dimension {}",
            space.dim()
        );
        trace.push(TraceRow {
            round,
            dofs: space.dim(),
            added,
            errors: compute_errors(u_h, &solution.fields, ensemble, subset)?,
        });
    }
    Ok(Enrichment {
        space,
        solution,
        trace,
    })
}
