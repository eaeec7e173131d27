//! Structured fine and coarse grids on the unit square.
//!
//! Every subdomain used by the method (the whole domain, a coarse neighborhood
//! `D_i`, its oversampled extension `D_i^+`) is an axis-aligned block of fine
//! cells, represented by [`Region`]. Regions carry their own row-major local
//! node and cell numbering together with the map back to global indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform `nx × ny` cell partition of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineGrid {
    pub nx: usize,
    pub ny: usize,
}

impl FineGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config(format!(
                "fine grid needs at least 2 cells per axis, got {nx}x{ny}"
            )));
        }
        Ok(Self { nx, ny })
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    pub fn cell_index(&self, cx: usize, cy: usize) -> usize {
        cy * self.nx + cx
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let ix = node % (self.nx + 1);
        let iy = node / (self.nx + 1);
        (ix as f64 * self.hx(), iy as f64 * self.hy())
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let cx = cell % self.nx;
        let cy = cell / self.nx;
        ((cx as f64 + 0.5) * self.hx(), (cy as f64 + 0.5) * self.hy())
    }

    /// The four global node indices of a cell, counter-clockwise from the lower left.
    pub fn cell_nodes(&self, cell: usize) -> [usize; 4] {
        let cx = cell % self.nx;
        let cy = cell / self.nx;
        let n0 = self.node_index(cx, cy);
        let w = self.nx + 1;
        [n0, n0 + 1, n0 + w + 1, n0 + w]
    }

    /// The region covering the whole domain.
    pub fn whole(&self) -> Region {
        Region::new(*self, 0, 0, self.nx, self.ny)
    }
}

/// A rectangular block of fine cells `[cx0, cx0+ncx) × [cy0, cy0+ncy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub grid: FineGrid,
    pub cx0: usize,
    pub cy0: usize,
    pub ncx: usize,
    pub ncy: usize,
}

impl Region {
    pub fn new(grid: FineGrid, cx0: usize, cy0: usize, ncx: usize, ncy: usize) -> Self {
        assert!(ncx >= 1 && ncy >= 1, "empty region");
        assert!(
            cx0 + ncx <= grid.nx && cy0 + ncy <= grid.ny,
            "region exceeds grid"
        );
        Self {
            grid,
            cx0,
            cy0,
            ncx,
            ncy,
        }
    }

    pub fn num_nodes(&self) -> usize {
        (self.ncx + 1) * (self.ncy + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.ncx * self.ncy
    }

    /// Nodes per local row.
    pub fn row_len(&self) -> usize {
        self.ncx + 1
    }

    pub fn local_node(&self, a: usize, b: usize) -> usize {
        b * (self.ncx + 1) + a
    }

    pub fn global_node(&self, local: usize) -> usize {
        let a = local % (self.ncx + 1);
        let b = local / (self.ncx + 1);
        self.grid.node_index(self.cx0 + a, self.cy0 + b)
    }

    pub fn global_cell(&self, local: usize) -> usize {
        let a = local % self.ncx;
        let b = local / self.ncx;
        self.grid.cell_index(self.cx0 + a, self.cy0 + b)
    }

    /// Local index of a global node, if the node lies in the closed region.
    pub fn local_of_global(&self, global: usize) -> Option<usize> {
        let w = self.grid.nx + 1;
        let ix = global % w;
        let iy = global / w;
        if ix < self.cx0 || iy < self.cy0 || ix > self.cx0 + self.ncx || iy > self.cy0 + self.ncy {
            return None;
        }
        Some(self.local_node(ix - self.cx0, iy - self.cy0))
    }

    /// Local node indices of the four corners of a local cell.
    pub fn cell_nodes(&self, local_cell: usize) -> [usize; 4] {
        let a = local_cell % self.ncx;
        let b = local_cell / self.ncx;
        let n0 = self.local_node(a, b);
        let w = self.ncx + 1;
        [n0, n0 + 1, n0 + w + 1, n0 + w]
    }

    pub fn is_boundary_node(&self, local: usize) -> bool {
        let a = local % (self.ncx + 1);
        let b = local / (self.ncx + 1);
        a == 0 || b == 0 || a == self.ncx || b == self.ncy
    }

    /// Boundary nodes in increasing local order.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&n| self.is_boundary_node(n))
            .collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&n| !self.is_boundary_node(n))
            .collect()
    }

    pub fn node_coords(&self, local: usize) -> (f64, f64) {
        self.grid.node_coords(self.global_node(local))
    }

    pub fn cell_center(&self, local_cell: usize) -> (f64, f64) {
        self.grid.cell_center(self.global_cell(local_cell))
    }

    /// Restricts a global cellwise field to this region.
    pub fn restrict_cells(&self, global: &[f64]) -> Vec<f64> {
        (0..self.num_cells())
            .map(|c| global[self.global_cell(c)])
            .collect()
    }

    /// Restricts a global nodal field to this region.
    pub fn restrict_nodes(&self, global: &[f64]) -> Vec<f64> {
        (0..self.num_nodes())
            .map(|n| global[self.global_node(n)])
            .collect()
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        other.cx0 >= self.cx0
            && other.cy0 >= self.cy0
            && other.cx0 + other.ncx <= self.cx0 + self.ncx
            && other.cy0 + other.ncy <= self.cy0 + self.ncy
    }

    /// Grows the block by `layers` fine cells per side, clipped to the domain.
    pub fn extended(&self, layers: usize) -> Region {
        let x0 = self.cx0.saturating_sub(layers);
        let y0 = self.cy0.saturating_sub(layers);
        let x1 = (self.cx0 + self.ncx + layers).min(self.grid.nx);
        let y1 = (self.cy0 + self.ncy + layers).min(self.grid.ny);
        Region::new(self.grid, x0, y0, x1 - x0, y1 - y0)
    }
}

/// Coarse partition `T^H` whose cells are `rx × ry` blocks of fine cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseGrid {
    pub fine: FineGrid,
    pub nx: usize,
    pub ny: usize,
    pub rx: usize,
    pub ry: usize,
    /// Interior coarse nodes `(I, J)`, row-major; position in this list is the node id.
    pub interior: Vec<(usize, usize)>,
}

impl CoarseGrid {
    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    /// Number of interior coarse nodes `N`.
    pub fn num_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn node_coords(&self, id: usize) -> (f64, f64) {
        let (i, j) = self.interior[id];
        (i as f64 * self.hx(), j as f64 * self.hy())
    }

    /// Id of the interior coarse node `(I, J)`.
    pub fn interior_id(&self, i: usize, j: usize) -> Option<usize> {
        if i == 0 || j == 0 || i >= self.nx || j >= self.ny {
            return None;
        }
        Some((j - 1) * (self.nx - 1) + (i - 1))
    }

    /// Coarse cell containing a fine cell.
    pub fn coarse_cell_of(&self, fine_cell: usize) -> (usize, usize) {
        let cx = fine_cell % self.fine.nx;
        let cy = fine_cell / self.fine.nx;
        (cx / self.rx, cy / self.ry)
    }

    /// Ids of interior coarse nodes whose neighborhood contains the coarse cell `(ci, cj)`.
    pub fn nodes_of_coarse_cell(&self, ci: usize, cj: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(4);
        for j in cj..=cj + 1 {
            for i in ci..=ci + 1 {
                if let Some(id) = self.interior_id(i, j) {
                    ids.push(id);
                }
            }
        }
        ids
    }
}

/// Builds the fine grid and its coarse partition.
pub fn build_grids(nx: usize, ny: usize, cnx: usize, cny: usize) -> Result<(FineGrid, CoarseGrid)> {
    let fine = FineGrid::new(nx, ny)?;
    if cnx < 2 || cny < 2 {
        return Err(Error::Config(format!(
            "coarse grid needs at least 2 cells per axis, got {cnx}x{cny}"
        )));
    }
    if nx % cnx != 0 || ny % cny != 0 {
        return Err(Error::Config(format!(
            "coarse grid {cnx}x{cny} does not divide fine grid {nx}x{ny}"
        )));
    }
    let mut interior = Vec::with_capacity((cnx - 1) * (cny - 1));
    for j in 1..cny {
        for i in 1..cnx {
            interior.push((i, j));
        }
    }
    let coarse = CoarseGrid {
        fine,
        nx: cnx,
        ny: cny,
        rx: nx / cnx,
        ry: ny / cny,
        interior,
    };
    Ok((fine, coarse))
}

/// Coarse neighborhood `D_i`: the 2×2 block of coarse cells around interior node `x_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub id: usize,
    pub coarse_node: (usize, usize),
    /// Coarse cells `(ci, cj)` having `x_i` as a vertex.
    pub coarse_cells: Vec<(usize, usize)>,
    pub region: Region,
    /// Local node ids strictly inside `D_i`.
    pub interior_nodes: Vec<usize>,
    /// Local node ids on `∂D_i`, i.e. `B_h(D_i)`.
    pub boundary_nodes: Vec<usize>,
}

impl Neighborhood {
    pub fn global_nodes(&self) -> Vec<usize> {
        (0..self.region.num_nodes())
            .map(|n| self.region.global_node(n))
            .collect()
    }
}

pub fn neighborhood(cg: &CoarseGrid, id: usize) -> Result<Neighborhood> {
    let &(ci, cj) = cg
        .interior
        .get(id)
        .ok_or_else(|| Error::Config(format!("coarse node {id} is not an interior node")))?;
    let region = Region::new(
        cg.fine,
        (ci - 1) * cg.rx,
        (cj - 1) * cg.ry,
        2 * cg.rx,
        2 * cg.ry,
    );
    let coarse_cells = vec![(ci - 1, cj - 1), (ci, cj - 1), (ci - 1, cj), (ci, cj)];
    Ok(Neighborhood {
        id,
        coarse_node: (ci, cj),
        coarse_cells,
        interior_nodes: region.interior_nodes(),
        boundary_nodes: region.boundary_nodes(),
        region,
    })
}

/// All neighborhoods of a coarse grid, indexed by coarse node id.
pub fn neighborhoods(cg: &CoarseGrid) -> Vec<Neighborhood> {
    (0..cg.num_interior())
        .map(|i| neighborhood(cg, i).expect("interior id"))
        .collect()
}

/// Oversampled domain `D_i^+`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversampledNeighborhood {
    pub base: usize,
    pub layers: usize,
    pub region: Region,
    /// Base neighborhood `D_i` (for restricting fields).
    pub inner: Region,
    /// Local node ids (in `region`) on `∂D_i^+`.
    pub boundary_nodes: Vec<usize>,
    pub interior_nodes: Vec<usize>,
}

impl OversampledNeighborhood {
    /// Local ids in `D_i^+` of the nodes of `D_i`, ordered by `D_i`'s local numbering.
    pub fn inner_node_map(&self) -> Vec<usize> {
        (0..self.inner.num_nodes())
            .map(|n| {
                self.region
                    .local_of_global(self.inner.global_node(n))
                    .expect("D_i lies inside D_i^+")
            })
            .collect()
    }

    /// Restricts a nodal field on `D_i^+` to `D_i`.
    pub fn restrict(&self, values: &[f64]) -> Vec<f64> {
        self.inner_node_map().iter().map(|&n| values[n]).collect()
    }
}

pub fn oversample(n: &Neighborhood, layers: usize) -> OversampledNeighborhood {
    let region = n.region.extended(layers);
    OversampledNeighborhood {
        base: n.id,
        layers,
        inner: n.region,
        boundary_nodes: region.boundary_nodes(),
        interior_nodes: region.interior_nodes(),
        region,
    }
}

/// Coarse bilinear hat `χ_i` for interior coarse node `id`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hat {
    pub x0: f64,
    pub y0: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Hat {
    pub fn new(cg: &CoarseGrid, id: usize) -> Self {
        let (x0, y0) = cg.node_coords(id);
        Self {
            x0,
            y0,
            hx: cg.hx(),
            hy: cg.hy(),
        }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let sx = (1.0 - (x - self.x0).abs() / self.hx).max(0.0);
        let sy = (1.0 - (y - self.y0).abs() / self.hy).max(0.0);
        sx * sy
    }

    /// `|∇χ_i|²` at a point inside the support (away from kinks).
    pub fn grad_sq(&self, x: f64, y: f64) -> f64 {
        let sx = (1.0 - (x - self.x0).abs() / self.hx).max(0.0);
        let sy = (1.0 - (y - self.y0).abs() / self.hy).max(0.0);
        if sx == 0.0 || sy == 0.0 {
            return 0.0;
        }
        let gx = sy / self.hx;
        let gy = sx / self.hy;
        gx * gx + gy * gy
    }
}

/// Nodal samples of `χ_i` on `D_i`.
pub fn partition_of_unity(cg: &CoarseGrid, id: usize) -> Result<Vec<f64>> {
    let n = neighborhood(cg, id)?;
    let hat = Hat::new(cg, id);
    Ok((0..n.region.num_nodes())
        .map(|l| {
            let (x, y) = n.region.node_coords(l);
            hat.value(x, y)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_grid_has_one_interior_node() {
        let (_, cg) = build_grids(4, 4, 2, 2).unwrap();
        assert_eq!(cg.num_interior(), 1);
        assert_eq!(cg.node_coords(0), (0.5, 0.5));
    }

    #[test]
    fn interior_count_formula() {
        let (_, cg) = build_grids(100, 100, 10, 10).unwrap();
        assert_eq!(cg.num_interior(), 81);
    }

    #[test]
    fn non_divisible_refinement_rejected() {
        assert!(matches!(build_grids(10, 10, 3, 3), Err(Error::Config(_))));
        assert!(matches!(build_grids(10, 10, 1, 5), Err(Error::Config(_))));
        assert!(matches!(FineGrid::new(1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn single_neighborhood_is_whole_domain() {
        let (fine, cg) = build_grids(4, 4, 2, 2).unwrap();
        let n = neighborhood(&cg, 0).unwrap();
        assert_eq!(n.region, fine.whole());
        let domain_boundary: Vec<usize> = fine.whole().boundary_nodes();
        let mut b: Vec<usize> = n
            .boundary_nodes
            .iter()
            .map(|&l| n.region.global_node(l))
            .collect();
        b.sort();
        assert_eq!(b, domain_boundary);
    }

    #[test]
    fn corner_neighborhood_geometry() {
        let (_, cg) = build_grids(100, 100, 10, 10).unwrap();
        let id = cg.interior_id(1, 1).unwrap();
        let n = neighborhood(&cg, id).unwrap();
        let (x0, y0) = n.region.node_coords(0);
        let (x1, y1) = n.region.node_coords(n.region.num_nodes() - 1);
        assert!((x0 - 0.0).abs() < 1e-14 && (y0 - 0.0).abs() < 1e-14);
        assert!((x1 - 0.2).abs() < 1e-14 && (y1 - 0.2).abs() < 1e-14);
        assert_eq!(n.coarse_cells.len(), 4);
    }

    #[test]
    fn interior_fine_node_count_matches_enumeration() {
        let (fine, cg) = build_grids(100, 100, 10, 10).unwrap();
        let n = neighborhood(&cg, cg.interior_id(4, 6).unwrap()).unwrap();
        // brute force: global fine nodes with coordinates strictly inside D_i
        let (xc, yc) = cg.node_coords(n.id);
        let count = (0..fine.num_nodes())
            .filter(|&g| {
                let (x, y) = fine.node_coords(g);
                (x - xc).abs() < cg.hx() - 1e-12 && (y - yc).abs() < cg.hy() - 1e-12
            })
            .count();
        assert_eq!(count, 361);
        assert_eq!(n.interior_nodes.len(), count);
        assert_eq!(n.boundary_nodes.len(), 80);
    }

    #[test]
    fn neighborhood_node_sets_partition() {
        let (_, cg) = build_grids(30, 20, 3, 2).unwrap();
        for n in neighborhoods(&cg) {
            let mut all: Vec<usize> = n
                .interior_nodes
                .iter()
                .chain(&n.boundary_nodes)
                .copied()
                .collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), n.interior_nodes.len() + n.boundary_nodes.len());
            assert_eq!(all, (0..n.region.num_nodes()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn boundary_node_rejected() {
        let (_, cg) = build_grids(20, 20, 4, 4).unwrap();
        assert!(neighborhood(&cg, 9).is_err());
    }

    #[test]
    fn oversampling_zero_is_identity() {
        let (_, cg) = build_grids(40, 40, 4, 4).unwrap();
        let n = neighborhood(&cg, 4).unwrap();
        let o = oversample(&n, 0);
        assert_eq!(o.region, n.region);
        assert_eq!(o.boundary_nodes, n.boundary_nodes);
        assert_eq!(o.interior_nodes, n.interior_nodes);
    }

    #[test]
    fn oversampling_clips_at_domain_edge() {
        let (_, cg) = build_grids(100, 100, 10, 10).unwrap();
        let n = neighborhood(&cg, cg.interior_id(1, 5).unwrap()).unwrap();
        let o = oversample(&n, 10);
        assert_eq!(o.region.cx0, 0);
        assert_eq!(o.region.ncx, 30);
        assert_eq!(o.region.ncy, 40);
        assert!(o.region.contains_region(&n.region));
    }

    #[test]
    fn interior_oversampling_size() {
        let (_, cg) = build_grids(100, 100, 10, 10).unwrap();
        let n = neighborhood(&cg, cg.interior_id(5, 5).unwrap()).unwrap();
        let o = oversample(&n, 4);
        assert_eq!((o.region.ncx, o.region.ncy), (28, 28));
        let map = o.inner_node_map();
        assert_eq!(map.len(), n.region.num_nodes());
        for (l, &p) in map.iter().enumerate() {
            assert_eq!(n.region.global_node(l), o.region.global_node(p));
        }
    }

    #[test]
    fn hat_values() {
        let (_, cg) = build_grids(20, 20, 4, 4).unwrap();
        let id = cg.interior_id(2, 2).unwrap();
        let hat = Hat::new(&cg, id);
        assert_eq!(hat.value(0.5, 0.5), 1.0);
        assert!((hat.value(0.5 + 0.125, 0.5 - 0.125) - 0.25).abs() < 1e-15);
        let chi = partition_of_unity(&cg, id).unwrap();
        let n = neighborhood(&cg, id).unwrap();
        for &b in &n.boundary_nodes {
            assert_eq!(chi[b], 0.0);
        }
        assert!(chi.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn hats_sum_to_one_away_from_boundary() {
        let (fine, cg) = build_grids(30, 30, 5, 5).unwrap();
        let hats: Vec<Hat> = (0..cg.num_interior()).map(|i| Hat::new(&cg, i)).collect();
        for g in 0..fine.num_nodes() {
            let (x, y) = fine.node_coords(g);
            let d = x.min(y).min(1.0 - x).min(1.0 - y);
            if d >= cg.hx() - 1e-12 {
                let s: f64 = hats.iter().map(|h| h.value(x, y)).sum();
                assert!(
                    (s - 1.0).abs() <= 4.0 * f64::EPSILON,
                    "sum {s} at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn hat_gradient_matches_finite_difference() {
        let (_, cg) = build_grids(20, 20, 4, 4).unwrap();
        let hat = Hat::new(&cg, cg.interior_id(1, 2).unwrap());
        let (x, y) = (0.31, 0.42);
        let e = 1e-6;
        let gx = (hat.value(x + e, y) - hat.value(x - e, y)) / (2.0 * e);
        let gy = (hat.value(x, y + e) - hat.value(x, y - e)) / (2.0 * e);
        assert!((hat.grad_sq(x, y) - (gx * gx + gy * gy)).abs() < 1e-5);
    }
}
