//! Uniform-grid radius queries over 2-D points.

use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    points: Vec<[f64; 2]>,
}

impl GridIndex {
    pub fn new(points: &[[f64; 2]], cell: f64) -> Self {
        let cell = if cell > 0.0 { cell } else { 1.0 };
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(key(p, cell)).or_default().push(i);
        }
        Self {
            cell,
            buckets,
            points: points.to_vec(),
        }
    }

    /// Indices of points strictly closer than `radius` to `q`, ascending.
    pub fn within(&self, q: [f64; 2], radius: f64) -> Vec<usize> {
        if radius <= 0.0 {
            return Vec::new();
        }
        let span = (radius / self.cell).ceil() as i64;
        let (cx, cy) = key(&q, self.cell);
        let mut out = Vec::new();
        for dx in -span..=span {
            for dy in -span..=span {
                // Far-away queries saturate the key; skip cells past i64 range.
                let (Some(x), Some(y)) = (cx.checked_add(dx), cy.checked_add(dy)) else {
                    continue;
                };
                if let Some(b) = self.buckets.get(&(x, y)) {
                    out.extend(
                        b.iter()
                            .copied()
                            .filter(|&i| dist(&self.points[i], &q) < radius),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn key(p: &[f64; 2], cell: f64) -> (i64, i64) {
    ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
}

#[inline]
pub(crate) fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 0..120),
            q in (-60.0f64..60.0, -60.0f64..60.0),
            r in 0.0f64..30.0,
            cell in 0.5f64..20.0,
        ) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
            let idx = GridIndex::new(&pts, cell);
            let q = [q.0, q.1];
            let brute: Vec<usize> = (0..pts.len()).filter(|&i| dist(&pts[i], &q) < r).collect();
            prop_assert_eq!(idx.within(q, r), brute);
        }
    }

    #[test]
    fn extreme_queries_return_nothing() {
        let idx = GridIndex::new(&[[0.0, 0.0], [1.0, 1.0]], 2.0);
        for q in [[1e300, -1e300], [f64::MAX, 0.0], [f64::NAN, 0.0], [f64::INFINITY, 1.0]] {
            assert!(idx.within(q, 5.0).is_empty());
        }
    }
}
