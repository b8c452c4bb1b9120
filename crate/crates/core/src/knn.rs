//! Exact k-nearest-neighbor queries over a uniform grid.

use rayon::prelude::*;

use crate::Vec3;

/// Points per occupied cell the grid aims for.
const TARGET_OCCUPANCY: f64 = 4.0;

fn occupied_cells(points: &[Vec3], lo: Vec3, cell: f64) -> usize {
    let mut keys: Vec<[i64; 3]> = points
        .iter()
        .map(|p| [0, 1, 2].map(|a| ((p[a] - lo[a]) / cell) as i64))
        .collect();
    keys.par_sort_unstable();
    keys.dedup();
    keys.len()
}

/// Points bucketed into cubic cells of a dense grid over their bounding box.
pub struct SpatialGrid {
    points: Vec<Vec3>,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// `cell_start[c]..cell_start[c + 1]` indexes `order` for cell `c`.
    cell_start: Vec<u32>,
    order: Vec<u32>,
    /// `points` permuted by `order`, so each cell's points are contiguous.
    binned: Vec<Vec3>,
}

/// Neighbor index and Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

impl SpatialGrid {
    pub fn new(points: &[Vec3]) -> Self {
        let n = points.len().max(1);
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vec3::zeros();
            hi = Vec3::zeros();
        }
        let ext = hi - lo;
        let max_ext = ext.max().max(1e-12);
        let padded = ext.map(|e| e.max(max_ext * 1e-3));
        // About two points per cell for a volume-filling cloud.
        let mut cell = (padded.x * padded.y * padded.z * 2.0 / n as f64).cbrt();
        let dims_for = |cell: f64| ext.map(|e| (e / cell).floor() as usize + 1);
        let fits = |cell: f64, per_point: f64| {
            let d = dims_for(cell);
            (d.x as f64) * (d.y as f64) * (d.z as f64) <= per_point * n as f64 + 64.0
        };
        while !fits(cell, 4.0) {
            cell *= 1.25;
        }
        // Surfaces crowd far more points into each occupied cell; shrink the
        // cell toward TARGET_OCCUPANCY assuming occupancy scales with area.
        let occupancy = points.len() as f64 / occupied_cells(points, lo, cell).max(1) as f64;
        if occupancy > 2.0 * TARGET_OCCUPANCY {
            cell *= (TARGET_OCCUPANCY / occupancy).sqrt();
            while !fits(cell, 16.0) {
                cell *= 1.1;
            }
        }
        let d = dims_for(cell);
        let dims = [d.x, d.y, d.z];
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: &Vec3| {
            let c = [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell) as usize).min(dims[a] - 1));
            c[0] + dims[0] * (c[1] + dims[1] * c[2])
        };
        let ids: Vec<usize> = points.iter().map(cell_of).collect();
        let mut cell_start = vec![0u32; n_cells + 1];
        for &c in &ids {
            cell_start[c + 1] += 1;
        }
        for c in 0..n_cells {
            cell_start[c + 1] += cell_start[c];
        }
        let mut cursor = cell_start.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        let binned = order.iter().map(|&i| points[i as usize]).collect();
        Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            cell_start,
            order,
            binned,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn cell_coords(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor() as i64;
            c.clamp(0, self.dims[a] as i64 - 1)
        })
    }

    /// The `k` nearest points to `q`, nearest first, ties broken by index.
    /// `exclude` removes one point (typically the query itself).
    pub fn k_nearest(&self, q: &Vec3, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let available = self.points.len() - usize::from(exclude.is_some_and(|e| e < self.points.len()));
        let k = k.min(available);
        if k == 0 {
            return Vec::new();
        }
        // Sorted ascending by (d², index); at most k entries.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let c = self.cell_coords(q);
        let max_r = *self.dims.iter().max().unwrap() as i64;
        for r in 0..=max_r {
            for dz in -r..=r {
                let z = c[2] + dz;
                if z < 0 || z >= self.dims[2] as i64 {
                    continue;
                }
                for dy in -r..=r {
                    let y = c[1] + dy;
                    if y < 0 || y >= self.dims[1] as i64 {
                        continue;
                    }
                    let on_shell = dz.abs() == r || dy.abs() == r;
                    let step = if on_shell || r == 0 { 1 } else { 2 * r as usize };
                    let mut dx = -r;
                    while dx <= r {
                        let x = c[0] + dx;
                        if x >= 0 && x < self.dims[0] as i64 {
                            let cell = x as usize + self.dims[0] * (y as usize + self.dims[1] * z as usize);
                            self.scan_cell(cell, q, k, exclude, &mut best);
                        }
                        dx += step as i64;
                    }
                }
            }
            if best.len() == k {
                let reach = r as f64 * self.cell;
                if best[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        best.into_iter()
            .map(|(d2, index)| Neighbor {
                index,
                distance: d2.sqrt(),
            })
            .collect()
    }

    #[inline]
    fn scan_cell(&self, cell: usize, q: &Vec3, k: usize, exclude: Option<usize>, best: &mut Vec<(f64, usize)>) {
        let range = self.cell_start[cell] as usize..self.cell_start[cell + 1] as usize;
        for (&i, p) in self.order[range.clone()].iter().zip(&self.binned[range]) {
            let i = i as usize;
            if Some(i) == exclude {
                continue;
            }
            let d2 = (p - q).norm_squared();
            let key = (d2, i);
            if best.len() == k {
                let last = best[k - 1];
                if (key.0, key.1) >= (last.0, last.1) {
                    continue;
                }
                best.pop();
            }
            let pos = best.partition_point(|e| (e.0, e.1) < (key.0, key.1));
            best.insert(pos, key);
        }
    }

    /// `k` nearest neighbors of every stored point, excluding itself.
    pub fn all_k_nearest(&self, k: usize) -> Vec<Vec<Neighbor>> {
        // Queries run in cell order for locality, then return to input order.
        let binned: Vec<Vec<Neighbor>> = self
            .order
            .par_iter()
            .zip(self.binned.par_iter())
            .map(|(&i, p)| self.k_nearest(p, k, Some(i as usize)))
            .collect();
        let mut out = vec![Vec::new(); self.points.len()];
        for (&i, r) in self.order.iter().zip(binned) {
            out[i as usize] = r;
        }
        out
    }
}

/// Distance from every point to its nearest other point (`INFINITY` for a
/// single point).
pub fn nearest_neighbor_distances(points: &[Vec3]) -> Vec<f64> {
    SpatialGrid::new(points)
        .all_k_nearest(1)
        .iter()
        .map(|n| n.first().map_or(f64::INFINITY, |n| n.distance))
        .collect()
}

/// Mean nearest-neighbor distance; `None` with fewer than two points.
pub fn mean_nn_distance(points: &[Vec3]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let d = nearest_neighbor_distances(points);
    Some(d.iter().sum::<f64>() / d.len() as f64)
}
