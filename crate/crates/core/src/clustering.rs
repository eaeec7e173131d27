//! Coarsening of the realization set per neighborhood with k-means in the
//! space of reduced local-solution coefficients.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::PermeabilityEnsemble;
use crate::grid::Region;
use crate::localreduce::ReducedCoefficients;
use crate::rng;

/// Feature rows; Euclidean distance between rows is the reduced-solution distance `d^i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub neighborhood: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        sq_dist(&self.rows[a], &self.rows[b]).sqrt()
    }
}

pub fn build_features(reduced: &ReducedCoefficients) -> FeatureTable {
    FeatureTable {
        neighborhood: reduced.neighborhood,
        rows: reduced.rows.clone(),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// Labels in `0..clusters`, numbered by first appearance.
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Within-cluster sum of squares.
    pub objective: f64,
    /// Objective after each Lloyd iteration of the retained run.
    pub history: Vec<f64>,
    pub clusters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            restarts: 10,
        }
    }
}

fn count_distinct(rows: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, ctr) in centers.iter().enumerate() {
        let d = sq_dist(x, ctr);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn centroids(rows: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (r, &l) in rows.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(r) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Within-cluster sum of squares of a labeling, recomputed from scratch.
pub fn objective(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let (centers, _) = centroids(rows, labels, k);
    rows.iter()
        .zip(labels)
        .map(|(r, &l)| sq_dist(r, &centers[l]))
        .sum()
}

fn kmeans_pp(rows: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut centers = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    idx = i;
                    break;
                }
                t -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[pick].clone());
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, centers.last().expect("just pushed")));
        }
    }
    centers
}

fn lloyd(rows: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, Vec<f64>) {
    let k = centers.len();
    let mut labels = vec![usize::MAX; rows.len()];
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut dists = vec![0.0; rows.len()];
        for (i, r) in rows.iter().enumerate() {
            let (c, d) = nearest(r, &centers);
            dists[i] = d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        let (mut new_centers, mut counts) = centroids(rows, &labels, k);
        // repair empty clusters with the point farthest from its center
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let far = (0..rows.len())
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("more points than clusters");
            labels[far] = empty;
            dists[far] = 0.0;
            changed = true;
            (new_centers, counts) = centroids(rows, &labels, k);
        }
        centers = new_centers;
        history.push(
            rows.iter()
                .zip(&labels)
                .map(|(r, &l)| sq_dist(r, &centers[l]))
                .sum(),
        );
        if !changed {
            break;
        }
    }
    (labels, history)
}

fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Lloyd k-means with k-means++ seeding and restarts; deterministic per seed.
pub fn kmeans(
    features: &FeatureTable,
    clusters: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<KMeansResult> {
    let rows = &features.rows;
    let n = rows.len();
    if clusters == 0 || clusters > n {
        return Err(Error::Config(format!(
            "cluster count {clusters} must be in 1..={n}"
        )));
    }
    let distinct = count_distinct(rows);
    let k = if clusters > distinct {
        log::warn!(
            "neighborhood {}: {clusters} clusters requested but only {distinct} distinct feature rows",
            features.neighborhood
        );
        distinct
    } else {
        clusters
    };
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = rng::stream(
            seed,
            &[
                rng::TAG_KMEANS,
                features.neighborhood as u64,
                restart as u64,
            ],
        );
        let init = kmeans_pp(rows, k, &mut rng);
        let (labels, history) = lloyd(rows, init, opts.max_iter);
        let obj = *history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| obj < b.2) {
            best = Some((labels, history, obj));
        }
    }
    let (labels, history, obj) = best.expect("at least one restart");
    let labels = canonical_labels(&labels);
    let (centers, _) = centroids(rows, &labels, k);
    Ok(KMeansResult {
        labels,
        centers,
        objective: obj,
        history,
        clusters: k,
    })
}

/// Clustering of `Ω_d` for one neighborhood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    pub neighborhood: usize,
    pub labels: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    /// `κ̄^(i,j)` on the cells of `D_i`.
    pub mean_fields: Vec<Vec<f64>>,
    /// Total ensemble weight per cluster.
    pub weight: Vec<f64>,
}

impl ClusterPartition {
    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn from_labels(
        neighborhood: usize,
        labels: Vec<usize>,
        ensemble: &PermeabilityEnsemble,
        region: &Region,
    ) -> Result<Self> {
        if labels.len() != ensemble.len() {
            return Err(Error::Mismatch(format!(
                "{} labels for {} realizations",
                labels.len(),
                ensemble.len()
            )));
        }
        let j = labels.iter().max().map_or(0, |m| m + 1);
        let mut members = vec![Vec::new(); j];
        for (w, &l) in labels.iter().enumerate() {
            members[l].push(w);
        }
        if members.iter().any(|m| m.is_empty()) {
            return Err(Error::Config(format!(
                "neighborhood {neighborhood}: empty cluster in labeling"
            )));
        }
        let weight = members
            .iter()
            .map(|m| m.iter().map(|&w| ensemble.weights[w]).sum())
            .collect();
        let mean_fields = cluster_mean_field(ensemble, &members, region);
        Ok(Self {
            neighborhood,
            labels,
            members,
            mean_fields,
            weight,
        })
    }
}

/// Unweighted cellwise mean of member realizations on a region.
pub fn cluster_mean_field(
    ensemble: &PermeabilityEnsemble,
    members: &[Vec<usize>],
    region: &Region,
) -> Vec<Vec<f64>> {
    members
        .iter()
        .map(|m| {
            let mut acc = vec![0.0; region.num_cells()];
            for &w in m {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += ensemble.realizations[w][region.global_cell(c)];
                }
            }
            acc.iter_mut().for_each(|a| *a /= m.len() as f64);
            acc
        })
        .collect()
}

/// CSV rows `neighborhood,realization,label`.
pub fn assignments_csv(partitions: &[ClusterPartition]) -> String {
    let mut out = String::from("neighborhood,realization,label\n");
    for p in partitions {
        for (w, l) in p.labels.iter().enumerate() {
            writeln!(out, "{},{},{}", p.neighborhood, w, l).expect("write to string");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FineGrid;

    fn table(rows: Vec<Vec<f64>>) -> FeatureTable {
        FeatureTable {
            neighborhood: 0,
            rows,
        }
    }

    #[test]
    fn one_cluster_is_constant() {
        let t = table((0..7).map(|i| vec![i as f64, (i * i) as f64]).collect());
        let r = kmeans(&t, 1, 3, KMeansOptions::default()).unwrap();
        assert!(r.labels.iter().all(|&l| l == 0));
    }

    /// Exhaustive minimum of the within-cluster sum of squares over all 2-partitions.
    fn best_two_partition(rows: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let n = rows.len();
        let mut best = (vec![], f64::INFINITY);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let obj = objective(rows, &canonical_labels(&labels));
            if obj < best.1 {
                best = (canonical_labels(&labels), obj);
            }
        }
        best
    }

    #[test]
    fn separated_points_split_optimally() {
        let rows = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let (expected, obj) = best_two_partition(&rows);
        assert_eq!(expected, vec![0, 0, 1, 1]);
        let r = kmeans(&table(rows), 2, 5, KMeansOptions::default()).unwrap();
        assert_eq!(r.labels, expected);
        assert!((r.objective - obj).abs() < 1e-12);
    }

    #[test]
    fn too_many_clusters_reduced_to_distinct_rows() {
        let rows = vec![vec![1.0], vec![1.0], vec![2.0], vec![2.0]];
        let r = kmeans(&table(rows), 3, 0, KMeansOptions::default()).unwrap();
        assert_eq!(r.clusters, 2);
        assert_eq!(r.labels, vec![0, 0, 1, 1]);
        assert!(kmeans(&table(vec![vec![0.0]]), 2, 0, KMeansOptions::default()).is_err());
    }

    #[test]
    fn cluster_means() {
        let grid = FineGrid::new(2, 2).unwrap();
        let ens =
            PermeabilityEnsemble::uniform(grid, vec![vec![1.0; 4], vec![3.0; 4], vec![5.0; 4]])
                .unwrap();
        let p = ClusterPartition::from_labels(0, vec![0, 0, 1], &ens, &grid.whole()).unwrap();
        assert_eq!(p.mean_fields[0], vec![2.0; 4]);
        assert_eq!(p.mean_fields[1], vec![5.0; 4]);
        assert!((p.weight[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(ClusterPartition::from_labels(0, vec![0, 0, 2], &ens, &grid.whole()).is_err());
    }

    #[test]
    fn assignments_csv_format() {
        let grid = FineGrid::new(2, 2).unwrap();
        let ens = PermeabilityEnsemble::uniform(grid, vec![vec![1.0; 4], vec![3.0; 4]]).unwrap();
        let p = ClusterPartition::from_labels(4, vec![0, 1], &ens, &grid.whole()).unwrap();
        assert_eq!(
            assignments_csv(&[p]),
            "neighborhood,realization,label\n4,0,0\n4,1,1\n"
        );
    }
}
