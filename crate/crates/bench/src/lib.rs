//! Shared fixtures for the kernel benchmarks.

use cgmsfem::clustering::ClusterPartition;
use cgmsfem::fields::{generate_logsine_medium, PermeabilityEnsemble};
use cgmsfem::grid::{build_grids, neighborhoods, CoarseGrid, FineGrid, Neighborhood};
use cgmsfem::offline::{build_offline_space, BasisSelection, OfflineConfig, OfflineSpace};

pub struct Fixture {
    pub fine: FineGrid,
    pub coarse: CoarseGrid,
    pub neighborhoods: Vec<Neighborhood>,
    pub ensemble: PermeabilityEnsemble,
    pub partitions: Vec<ClusterPartition>,
    pub space: OfflineSpace,
}

/// Log-sine medium on an `n × n` grid with `c × c` coarse cells, `m` realizations
/// and `j` round-robin clusters per neighborhood.
pub fn fixture(n: usize, c: usize, m: usize, j: usize, bases: usize) -> Fixture {
    let (fine, coarse) = build_grids(n, n, c, c).expect("valid grid");
    let ensemble = generate_logsine_medium(fine, 1, m).expect("medium");
    let nbhds = neighborhoods(&coarse);
    let labels: Vec<usize> = (0..m).map(|w| w % j).collect();
    let partitions: Vec<ClusterPartition> = nbhds
        .iter()
        .map(|nb| {
            ClusterPartition::from_labels(nb.id, labels.clone(), &ensemble, &nb.region)
                .expect("labels")
        })
        .collect();
    let cfg = OfflineConfig {
        selection: BasisSelection::Fixed(bases),
        randomized: None,
    };
    let space = build_offline_space(&coarse, &nbhds, &partitions, &cfg).expect("offline space");
    Fixture {
        fine,
        coarse,
        neighborhoods: nbhds,
        ensemble,
        partitions,
        space,
    }
}
