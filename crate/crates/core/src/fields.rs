//! Random coefficient ensembles: generators and the on-disk ensemble format.
//!
//! An ensemble directory holds `ensemble.json` (grid size, realization count,
//! dtype and weights) plus one raw little-endian `f64` file per realization,
//! `realization_00000.bin`, ..., with cell values in row-major order.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FineGrid;
use crate::rng;

/// Discrete realization set `Ω_d` with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityEnsemble {
    pub grid: FineGrid,
    /// One cellwise field per realization, indexed by global fine cell.
    pub realizations: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

pub const WEIGHT_TOL: f64 = 1e-12;

impl PermeabilityEnsemble {
    /// Ensemble with uniform weights `1/M`.
    pub fn uniform(grid: FineGrid, realizations: Vec<Vec<f64>>) -> Result<Self> {
        let m = realizations.len();
        Self::with_weights(grid, realizations, vec![1.0 / m as f64; m])
    }

    pub fn with_weights(
        grid: FineGrid,
        realizations: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if realizations.is_empty() {
            return Err(Error::Config(
                "ensemble needs at least one realization".into(),
            ));
        }
        if weights.len() != realizations.len() {
            return Err(Error::Mismatch(format!(
                "{} weights for {} realizations",
                weights.len(),
                realizations.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Config(format!("weights sum to {total}, expected 1")));
        }
        for (i, r) in realizations.iter().enumerate() {
            if r.len() != grid.num_cells() {
                return Err(Error::Mismatch(format!(
                    "realization {i} has {} cells, grid has {}",
                    r.len(),
                    grid.num_cells()
                )));
            }
            if let Some(c) = r.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!(
                    "realization {i} has non-positive or non-finite value {} at cell {c}",
                    r[c]
                )));
            }
        }
        Ok(Self {
            grid,
            realizations,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.realizations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.realizations.is_empty()
    }

    /// Sub-ensemble of the given realizations with renormalized weights.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let w: f64 = ids.iter().map(|&i| self.weights[i]).sum();
        Self::with_weights(
            self.grid,
            ids.iter().map(|&i| self.realizations[i].clone()).collect(),
            ids.iter().map(|&i| self.weights[i] / w).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
}

/// Axis-aligned inclusion in unit-square coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub shape: Shape,
    pub center: [f64; 2],
    pub half: [f64; 2],
}

/// Horizontal high-permeability channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub y: f64,
    pub x0: f64,
    pub x1: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InclusionMediumConfig {
    pub background: f64,
    pub inclusions: Vec<Inclusion>,
    pub channels: Vec<Channel>,
    /// Contrast range `[c_min, c_max]`, sampled log-uniformly per feature and realization.
    pub contrast: [f64; 2],
    /// Maximum translation per axis, in fine cells.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for InclusionMediumConfig {
    fn default() -> Self {
        let rect = |x: f64, y: f64, a: f64, b: f64| Inclusion {
            shape: Shape::Rect,
            center: [x, y],
            half: [a, b],
        };
        Self {
            background: 1.0,
            inclusions: vec![
                rect(0.25, 0.22, 0.04, 0.03),
                rect(0.50, 0.26, 0.03, 0.05),
                rect(0.75, 0.23, 0.05, 0.03),
                rect(0.30, 0.50, 0.03, 0.04),
                rect(0.70, 0.52, 0.04, 0.05),
                rect(0.25, 0.76, 0.05, 0.04),
                rect(0.52, 0.74, 0.04, 0.03),
                rect(0.76, 0.77, 0.03, 0.04),
            ],
            channels: vec![
                Channel {
                    y: 0.38,
                    x0: 0.20,
                    x1: 0.72,
                    half_width: 0.015,
                },
                Channel {
                    y: 0.62,
                    x0: 0.28,
                    x1: 0.80,
                    half_width: 0.015,
                },
            ],
            contrast: [1e3, 1e4],
            jitter: 3,
            seed: 2024,
        }
    }
}

impl InclusionMediumConfig {
    pub fn validate(&self) -> Result<()> {
        let [cmin, cmax] = self.contrast;
        if !(self.background > 0.0) || !(cmin > self.background) || !(cmax >= cmin) {
            return Err(Error::Config(format!(
                "inclusion medium needs c_max >= c_min > background > 0, got background {} contrast {:?}",
                self.background, self.contrast
            )));
        }
        Ok(())
    }
}

fn rasterize(
    grid: &FineGrid,
    field: &mut [f64],
    value: f64,
    inside: impl Fn(f64, f64) -> bool,
) -> usize {
    let mut hits = 0;
    for c in 0..grid.num_cells() {
        let (x, y) = grid.cell_center(c);
        if inside(x, y) {
            field[c] = value;
            hits += 1;
        }
    }
    hits
}

/// One realization of the inclusion/channel medium.
pub fn inclusion_realization(
    cfg: &InclusionMediumConfig,
    grid: &FineGrid,
    index: usize,
) -> Vec<f64> {
    let mut rng = rng::stream(cfg.seed, &[rng::TAG_INCLUSION, index as u64]);
    let j = cfg.jitter as i64;
    let (lmin, lmax) = (cfg.contrast[0].ln(), cfg.contrast[1].ln());
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let dx = rng.random_range(-j..=j) as f64 * grid.hx();
        let dy = rng.random_range(-j..=j) as f64 * grid.hy();
        let c = if lmax > lmin {
            rng.random_range(lmin..=lmax).exp()
        } else {
            cfg.contrast[0]
        };
        (dx, dy, c)
    };
    let mut field = vec![cfg.background; grid.num_cells()];
    for (k, inc) in cfg.inclusions.iter().enumerate() {
        let (dx, dy, c) = draw(&mut rng);
        let (cx, cy) = (inc.center[0] + dx, inc.center[1] + dy);
        let [a, b] = inc.half;
        let hits = match inc.shape {
            Shape::Rect => rasterize(grid, &mut field, c, |x, y| {
                (x - cx).abs() <= a && (y - cy).abs() <= b
            }),
            Shape::Ellipse => rasterize(grid, &mut field, c, |x, y| {
                let (u, v) = ((x - cx) / a, (y - cy) / b);
                u * u + v * v <= 1.0
            }),
        };
        if hits == 0 {
            log::warn!("realization {index}: inclusion {k} left the domain and was skipped");
        }
    }
    for (k, ch) in cfg.channels.iter().enumerate() {
        let (dx, dy, c) = draw(&mut rng);
        let yc = ch.y + dy;
        let (x0, x1) = (ch.x0 + dx, ch.x1 + dx);
        let hits = rasterize(grid, &mut field, c, |x, y| {
            (y - yc).abs() <= ch.half_width && x >= x0 && x <= x1
        });
        if hits == 0 {
            log::warn!("realization {index}: channel {k} left the domain and was skipped");
        }
    }
    field
}

pub fn generate_inclusion_medium(
    cfg: &InclusionMediumConfig,
    grid: FineGrid,
    m: usize,
) -> Result<PermeabilityEnsemble> {
    cfg.validate()?;
    if m == 0 {
        return Err(Error::Config("realization count must be at least 1".into()));
    }
    let realizations = (0..m)
        .into_par_iter()
        .map(|i| inclusion_realization(cfg, &grid, i))
        .collect();
    PermeabilityEnsemble::uniform(grid, realizations)
}

/// The three spatial factors `g_k(x)` multiplying the standard normals.
pub fn logsine_factors(x: f64, y: f64) -> [f64; 3] {
    use std::f64::consts::PI;
    let s = |a: f64, b: f64| (a * PI * x).sin() * (b * PI * y).sin();
    [
        (2.0 + s(7.0, 8.0)) / (2.0 + s(9.0, 7.0)),
        (2.0 + s(13.0, 11.0)) / (2.0 + s(11.0, 13.0)),
        (2.0 + s(12.0, 14.0)) / (2.0 + s(15.0, 15.0)),
    ]
}

/// Standard normal draws `ξ_1..ξ_3` of realization `index`.
pub fn logsine_xi(seed: u64, index: usize) -> [f64; 3] {
    let mut rng = rng::stream(seed, &[rng::TAG_LOGSINE, index as u64]);
    [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ]
}

pub fn logsine_value(x: f64, y: f64, xi: &[f64; 3]) -> f64 {
    let g = logsine_factors(x, y);
    (0.1 + g[0] * xi[0] + g[1] * xi[1] + g[2] * xi[2]).exp()
}

pub fn logsine_realization(grid: &FineGrid, xi: &[f64; 3]) -> Vec<f64> {
    (0..grid.num_cells())
        .map(|c| {
            let (x, y) = grid.cell_center(c);
            logsine_value(x, y, xi)
        })
        .collect()
}

pub fn generate_logsine_medium(
    grid: FineGrid,
    seed: u64,
    m: usize,
) -> Result<PermeabilityEnsemble> {
    if m == 0 {
        return Err(Error::Config("realization count must be at least 1".into()));
    }
    let realizations = (0..m)
        .into_par_iter()
        .map(|i| logsine_realization(&grid, &logsine_xi(seed, i)))
        .collect();
    PermeabilityEnsemble::uniform(grid, realizations)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EnsembleHeader {
    nx: usize,
    ny: usize,
    #[serde(rename = "M")]
    m: usize,
    dtype: String,
    weights: Vec<f64>,
}

const HEADER_FILE: &str = "ensemble.json";
const DTYPE: &str = "f64-le";

fn realization_file(i: usize) -> String {
    format!("realization_{i:05}.bin")
}

pub fn save_ensemble(ens: &PermeabilityEnsemble, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = EnsembleHeader {
        nx: ens.grid.nx,
        ny: ens.grid.ny,
        m: ens.len(),
        dtype: DTYPE.into(),
        weights: ens.weights.clone(),
    };
    let path = dir.join(HEADER_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
    for (i, r) in ens.realizations.iter().enumerate() {
        let bytes: Vec<u8> = r.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(realization_file(i));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<PermeabilityEnsemble> {
    let dir = dir.as_ref();
    let path = dir.join(HEADER_FILE);
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let header: EnsembleHeader = serde_json::from_slice(&raw)
        .map_err(|e| Error::ingestion(&path, format!("malformed header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::ingestion(
            &path,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let grid =
        FineGrid::new(header.nx, header.ny).map_err(|e| Error::ingestion(&path, e.to_string()))?;
    if header.m == 0 || header.weights.len() != header.m {
        return Err(Error::ingestion(
            &path,
            format!("M = {} with {} weights", header.m, header.weights.len()),
        ));
    }
    let total: f64 = header.weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::ingestion(
            &path,
            format!("weights sum to {total}, expected 1"),
        ));
    }
    let mut realizations = Vec::with_capacity(header.m);
    for i in 0..header.m {
        let p = dir.join(realization_file(i));
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if bytes.len() != 8 * grid.num_cells() {
            return Err(Error::ingestion(
                &p,
                format!("{} bytes, expected {}", bytes.len(), 8 * grid.num_cells()),
            ));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(c) = values.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::ingestion(
                &p,
                format!(
                    "non-positive or non-finite coefficient {} at cell {c}",
                    values[c]
                ),
            ));
        }
        realizations.push(values);
    }
    PermeabilityEnsemble::with_weights(grid, realizations, header.weights)
        .map_err(|e| Error::ingestion(dir, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_randomness_gives_identical_realizations() {
        let grid = FineGrid::new(20, 20).unwrap();
        let cfg = InclusionMediumConfig {
            jitter: 0,
            contrast: [500.0, 500.0],
            ..Default::default()
        };
        let ens = generate_inclusion_medium(&cfg, grid, 4).unwrap();
        for r in &ens.realizations[1..] {
            assert_eq!(r, &ens.realizations[0]);
        }
    }

    #[test]
    fn single_inclusion_two_valued() {
        let grid = FineGrid::new(20, 20).unwrap();
        let cfg = InclusionMediumConfig {
            inclusions: vec![Inclusion {
                shape: Shape::Ellipse,
                center: [0.5, 0.5],
                half: [0.2, 0.1],
            }],
            channels: vec![],
            contrast: [1e4, 1e4],
            jitter: 3,
            ..Default::default()
        };
        let ens = generate_inclusion_medium(&cfg, grid, 3).unwrap();
        for r in &ens.realizations {
            assert!(r.iter().all(|&v| v == 1.0 || v == 1e4));
            assert!(r.contains(&1e4));
        }
    }

    #[test]
    fn contrast_within_range_and_deterministic() {
        let grid = FineGrid::new(40, 40).unwrap();
        let cfg = InclusionMediumConfig {
            jitter: 4,
            ..Default::default()
        };
        let a = generate_inclusion_medium(&cfg, grid, 10).unwrap();
        let b = generate_inclusion_medium(&cfg, grid, 10).unwrap();
        assert_eq!(a, b);
        for r in &a.realizations {
            assert!(r.iter().all(|&v| v == 1.0 || (1e3..=1e4).contains(&v)));
        }
        // realization i does not depend on M
        let c = generate_inclusion_medium(&cfg, grid, 3).unwrap();
        assert_eq!(c.realizations[2], a.realizations[2]);
    }

    #[test]
    fn inclusion_config_validation() {
        let bad = InclusionMediumConfig {
            contrast: [0.5, 2.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(InclusionMediumConfig::default().validate().is_ok());
    }

    #[test]
    fn logsine_zero_xi_is_constant() {
        let grid = FineGrid::new(8, 8).unwrap();
        let r = logsine_realization(&grid, &[0.0; 3]);
        assert!(r.iter().all(|&v| (v - 0.1f64.exp()).abs() < 1e-15));
        assert!((0.1f64.exp() - 1.105171).abs() < 1e-6);
    }

    #[test]
    fn logsine_factor_bounds() {
        for i in 0..200 {
            for j in 0..200 {
                let g = logsine_factors(i as f64 / 199.0, j as f64 / 199.0);
                assert!(g
                    .iter()
                    .all(|&v| (1.0 / 3.0 - 1e-12..=3.0 + 1e-12).contains(&v)));
            }
        }
    }

    #[test]
    fn logsine_log_mean_monte_carlo() {
        // cell value at a fixed point: log κ - 0.1 = Σ g_k ξ_k, mean 0
        let (x, y) = (0.3125, 0.6875);
        let g = logsine_factors(x, y);
        let m = 100_000;
        let mut sum = 0.0;
        for i in 0..m {
            sum += logsine_value(x, y, &logsine_xi(11, i)).ln();
        }
        let mean = sum / m as f64;
        let sd = (g.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let stderr = sd / (m as f64).sqrt();
        assert!(
            (mean - 0.1).abs() <= 3.0 * stderr,
            "mean {mean}, stderr {stderr}"
        );
    }

    #[test]
    fn logsine_log_bounded_by_xi() {
        let grid = FineGrid::new(10, 10).unwrap();
        let ens = generate_logsine_medium(grid, 3, 20).unwrap();
        for (i, r) in ens.realizations.iter().enumerate() {
            let xi = logsine_xi(3, i);
            let bound = 3.0 * xi.iter().map(|v| v.abs()).sum::<f64>();
            assert!(r
                .iter()
                .all(|&v| (v.ln() - 0.1).abs() <= bound + 1e-12 && v > 0.0));
        }
    }

    #[test]
    fn ensemble_round_trip() {
        let grid = FineGrid::new(6, 4).unwrap();
        let ens = generate_logsine_medium(grid, 9, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(&ens, dir.path()).unwrap();
        assert_eq!(load_ensemble(dir.path()).unwrap(), ens);
    }

    #[test]
    fn ingestion_rejects_zero_coefficient() {
        let grid = FineGrid::new(4, 4).unwrap();
        let ens = generate_logsine_medium(grid, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(&ens, dir.path()).unwrap();
        let mut bytes = fs::read(dir.path().join("realization_00001.bin")).unwrap();
        bytes[8..16].copy_from_slice(&0f64.to_le_bytes());
        fs::write(dir.path().join("realization_00001.bin"), bytes).unwrap();
        let err = load_ensemble(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }), "{err}");
    }

    #[test]
    fn ingestion_rejects_bad_weights_and_sizes() {
        let grid = FineGrid::new(4, 4).unwrap();
        let ens = generate_logsine_medium(grid, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_ensemble(&ens, dir.path()).unwrap();
        let header_path = dir.path().join("ensemble.json");
        let original = fs::read_to_string(&header_path).unwrap();
        let mut header: serde_json::Value = serde_json::from_str(&original).unwrap();
        header["weights"] = serde_json::json!([0.5, 0.5 + 1e-9]);
        fs::write(&header_path, header.to_string()).unwrap();
        assert!(matches!(
            load_ensemble(dir.path()),
            Err(Error::Ingestion { .. })
        ));

        fs::write(&header_path, &original).unwrap();
        fs::write(dir.path().join("realization_00000.bin"), [0u8; 12]).unwrap();
        assert!(matches!(
            load_ensemble(dir.path()),
            Err(Error::Ingestion { .. })
        ));

        fs::write(&header_path, "{ not json").unwrap();
        assert!(matches!(
            load_ensemble(dir.path()),
            Err(Error::Ingestion { .. })
        ));
    }
}
