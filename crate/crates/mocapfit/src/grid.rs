//! Uniform spatial grid for exact nearest-point queries.
//!
//! The solver's Chamfer terms query the nearest posed vertex for every marker
//! in every frame. The grid only accelerates the search; results are exact and
//! tie-break to the lowest point index, matching a brute-force scan.

use nalgebra::Vector3;

pub struct SpatialGrid<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: `starts[c]..starts[c+1]` indexes into `entries`
    starts: Vec<u32>,
    entries: Vec<u32>,
}

impl<'a> SpatialGrid<'a> {
    /// Builds a grid over `points`. `cell` is clamped so the grid stays small.
    pub fn build(points: &'a [Vector3<f64>]) -> Self {
        assert!(!points.is_empty(), "grid over empty point set");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        let extent = (hi - lo).amax().max(1e-6);
        // aim for a handful of points per cell
        let target = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = (extent / target).max(extent * 1e-3).max(1e-6);
        let mut dims = [0usize; 3];
        for c in 0..3 {
            dims[c] = (((hi[c] - lo[c]) / cell).floor() as usize + 1).max(1);
        }
        let ncells = dims[0] * dims[1] * dims[2];

        let cell_of = |p: &Vector3<f64>| -> usize {
            let mut idx = [0usize; 3];
            for c in 0..3 {
                idx[c] = (((p[c] - lo[c]) / cell) as usize).min(dims[c] - 1);
            }
            (idx[2] * dims[1] + idx[1]) * dims[0] + idx[0]
        };

        // counting sort keeps entries in point-index order within each cell
        let mut counts = vec![0u32; ncells + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut cursor = counts;
        let mut entries = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            entries[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }

        Self {
            points,
            origin: lo,
            cell,
            dims,
            starts,
            entries,
        }
    }

    /// Index of the nearest point and its squared distance. Exact ties go to
    /// the lowest index.
    pub fn nearest(&self, query: &Vector3<f64>) -> (usize, f64) {
        let mut qc = [0i64; 3];
        for c in 0..3 {
            // clamp into bounds; the ring lower bound below stays valid because
            // clamped-axis distances only grow with the overhang
            qc[c] = (((query[c] - self.origin[c]) / self.cell).floor() as i64)
                .clamp(0, self.dims[c] as i64 - 1);
        }
        let mut best = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        let max_ring = self.dims.iter().max().unwrap() + 1;
        for ring in 0..=max_ring {
            // cells at Chebyshev distance `ring` are at least (ring-1)*cell away
            if best != usize::MAX {
                let min_dist = (ring as f64 - 1.0).max(0.0) * self.cell;
                if min_dist * min_dist > best_d2 {
                    break;
                }
            }
            self.scan_ring(&qc, ring as i64, query, &mut best, &mut best_d2);
        }
        debug_assert!(best != usize::MAX);
        (best, best_d2)
    }

    fn scan_ring(
        &self,
        qc: &[i64; 3],
        ring: i64,
        query: &Vector3<f64>,
        best: &mut usize,
        best_d2: &mut f64,
    ) {
        let lo = [qc[0] - ring, qc[1] - ring, qc[2] - ring];
        let hi = [qc[0] + ring, qc[1] + ring, qc[2] + ring];
        for z in lo[2]..=hi[2] {
            if z < 0 || z >= self.dims[2] as i64 {
                continue;
            }
            for y in lo[1]..=hi[1] {
                if y < 0 || y >= self.dims[1] as i64 {
                    continue;
                }
                let on_zy_face = z == lo[2] || z == hi[2] || y == lo[1] || y == hi[1];
                let mut x = lo[0];
                while x <= hi[0] {
                    if !on_zy_face && x != lo[0] && x != hi[0] {
                        // interior of the ring box: skip to the far face
                        x = hi[0];
                        continue;
                    }
                    if x >= 0 && x < self.dims[0] as i64 {
                        let cell = (z as usize * self.dims[1] + y as usize) * self.dims[0]
                            + x as usize;
                        let s = self.starts[cell] as usize;
                        let e = self.starts[cell + 1] as usize;
                        for &idx in &self.entries[s..e] {
                            let d2 = (self.points[idx as usize] - query).norm_squared();
                            if d2 < *best_d2 || (d2 == *best_d2 && (idx as usize) < *best) {
                                *best_d2 = d2;
                                *best = idx as usize;
                            }
                        }
                    }
                    x += 1;
                }
            }
        }
    }
}

/// Brute-force nearest point, the reference the grid must match.
pub fn nearest_brute_force(points: &[Vector3<f64>], query: &Vector3<f64>) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - query).norm_squared();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    (best, best_d2)
}
