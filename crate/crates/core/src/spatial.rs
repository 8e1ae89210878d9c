//! Uniform-grid spatial hashing for exact radius and k-nearest queries.
//!
//! Ties between equidistant neighbors are broken toward the lowest point
//! index so every query is deterministic.

use std::collections::HashMap;

use crate::geom::Point3;

pub(crate) type CellKey = [i64; 3];

pub(crate) fn cell_key(p: &Point3, cell: f64) -> CellKey {
    [
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    ]
}

pub(crate) struct SpatialHash<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<CellKey, Vec<usize>>,
    min_key: CellKey,
    max_key: CellKey,
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [Point3], cell: f64) -> Self {
        debug_assert!(cell > 0.0 && cell.is_finite());
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        let mut min_key = [i64::MAX; 3];
        let mut max_key = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = cell_key(p, cell);
            for a in 0..3 {
                min_key[a] = min_key[a].min(key[a]);
                max_key[a] = max_key[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            min_key,
            max_key,
        }
    }

    /// Picks a cell size giving roughly a few points per occupied cell.
    pub fn with_auto_cell(points: &'a [Point3]) -> Self {
        let cell = auto_cell_size(points);
        Self::new(points, cell)
    }

    /// Visits every point within `radius` (inclusive) of `q`, in no particular order.
    pub fn for_each_within(&self, q: &Point3, radius: f64, mut f: impl FnMut(usize, f64)) {
        if self.points.is_empty() {
            return;
        }
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64;
        let center = cell_key(q, self.cell);
        if self.should_scan(reach) {
            for (i, p) in self.points.iter().enumerate() {
                let d2 = (p - q).norm_squared();
                if d2 <= r2 {
                    f(i, d2);
                }
            }
            return;
        }
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                    if let Some(bucket) = self.cells.get(&key) {
                        for &i in bucket {
                            let d2 = (self.points[i] - q).norm_squared();
                            if d2 <= r2 {
                                f(i, d2);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Indices within `radius` of `q`, sorted ascending.
    pub fn within(&self, q: &Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(q, radius, |i, _| out.push(i));
        out.sort_unstable();
        out
    }

    /// Nearest point within `radius`, returning (index, squared distance).
    pub fn nearest_within(&self, q: &Point3, radius: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.for_each_within(q, radius, |i, d2| match best {
            Some((bi, bd)) if d2 > bd || (d2 == bd && i > bi) => {}
            _ => best = Some((i, d2)),
        });
        best
    }

    /// The `k` nearest points as (index, squared distance), closest first.
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let center = cell_key(q, self.cell);
        let max_ring = (0..3)
            .map(|a| {
                (center[a] - self.min_key[a])
                    .abs()
                    .max((self.max_key[a] - center[a]).abs())
            })
            .max()
            .unwrap_or(0);

        let mut found: Vec<(usize, f64)> = Vec::new();
        let mut ring = 0i64;
        loop {
            if self.should_scan(ring) {
                return self.brute_k_nearest(q, k);
            }
            self.visit_ring(center, ring, |bucket| {
                for &i in bucket {
                    found.push((i, (self.points[i] - q).norm_squared()));
                }
            });
            if found.len() >= k {
                sort_candidates(&mut found);
                // Anything outside the visited cube is at least `ring * cell` away.
                let safe = ring as f64 * self.cell;
                if found[k - 1].1 <= safe * safe || ring >= max_ring {
                    found.truncate(k);
                    return found;
                }
            } else if ring >= max_ring {
                sort_candidates(&mut found);
                found.truncate(k);
                return found;
            }
            ring += 1;
        }
    }

    fn brute_k_nearest(&self, q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .collect();
        sort_candidates(&mut all);
        all.truncate(k);
        all
    }

    fn should_scan(&self, reach: i64) -> bool {
        let side = (2 * reach + 1) as f64;
        side * side * side > 4.0 * self.points.len() as f64
    }

    fn visit_ring(&self, center: CellKey, ring: i64, mut f: impl FnMut(&[usize])) {
        for dx in -ring..=ring {
            for dy in -ring..=ring {
                let on_face = dx.abs() == ring || dy.abs() == ring;
                if on_face {
                    for dz in -ring..=ring {
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(bucket) = self.cells.get(&key) {
                            f(bucket);
                        }
                    }
                } else {
                    for dz in [-ring, ring] {
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(bucket) = self.cells.get(&key) {
                            f(bucket);
                        }
                        if ring == 0 {
                            break;
                        }
                    }
                }
            }
        }
    }
}

fn sort_candidates(c: &mut [(usize, f64)]) {
    c.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

pub(crate) fn auto_cell_size(points: &[Point3]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let mut lo = points[0].coords;
    let mut hi = points[0].coords;
    for p in points {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    let ext = hi - lo;
    // Treat flat or linear sets by the dimensions they actually span.
    let spans: Vec<f64> = ext.iter().copied().filter(|e| *e > 1e-9).collect();
    if spans.is_empty() {
        return 1.0;
    }
    let volume: f64 = spans.iter().product();
    let per_point = volume / points.len() as f64;
    let cell = 2.0 * per_point.powf(1.0 / spans.len() as f64);
    if cell.is_finite() && cell > 0.0 {
        cell
    } else {
        1.0
    }
}
