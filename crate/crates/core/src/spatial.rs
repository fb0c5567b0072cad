//! Nearest-neighbor queries over point sets and the Chamfer distance built on
//! them.
//!
//! The kd-tree is immutable after build and answers queries in f64 with the
//! same arithmetic as a brute-force scan, with ties broken toward the lowest
//! point id, so results are exactly reproducible and oracle-comparable.

use crate::error::CoreError;

/// Squared Euclidean distance. Shared by the tree and by brute-force oracles
/// so both produce bit-identical values.
pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Widen f32 positions (e.g. from records) into f64 query points.
pub fn to_f64_points(points: &[[f32; 3]]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()
}

#[derive(Debug, Clone)]
struct Node {
    /// Index into `points` of the splitting point.
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Immutable kd-tree over one point set. Ids are the indices of the points in
/// the slice the tree was built from.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: usize,
}

impl SpatialIndex {
    /// Build over a non-empty point set.
    pub fn build(points: &[[f64; 3]]) -> Result<Self, CoreError> {
        if points.is_empty() {
            return Err(CoreError::EmptyIndex);
        }
        let mut index = SpatialIndex { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: 0 };
        let mut ids: Vec<usize> = (0..points.len()).collect();
        index.root = index.build_range(&mut ids, 0).expect("non-empty range");
        Ok(index)
    }

    /// Convenience build from f32 positions.
    pub fn from_positions(points: &[[f32; 3]]) -> Result<Self, CoreError> {
        Self::build(&to_f64_points(points))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_range(&mut self, ids: &mut [usize], depth: usize) -> Option<usize> {
        if ids.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = ids.len() / 2;
        // Order by coordinate, then id, so the structure is independent of the
        // incoming permutation of equal points.
        ids.select_nth_unstable_by(mid, |&a, &b| {
            self.points[a][axis]
                .partial_cmp(&self.points[b][axis])
                .expect("finite coordinates")
                .then(a.cmp(&b))
        });
        let point = ids[mid];
        let (lo, rest) = ids.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_range(lo, depth + 1);
        let right = self.build_range(hi, depth + 1);
        let node = Node { point, axis, left, right };
        self.nodes.push(node);
        Some(self.nodes.len() - 1)
    }

    /// Nearest point to `query`: (id, squared distance). Ties break toward the
    /// lowest id, exactly as an ascending brute-force scan with `<` would.
    pub fn nearest(&self, query: [f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        best
    }

    fn nearest_rec(&self, node_id: usize, query: [f64; 3], best: &mut (usize, f64)) {
        let node = &self.nodes[node_id];
        let d2 = dist2(self.points[node.point], query);
        if d2 < best.1 || (d2 == best.1 && node.point < best.0) {
            *best = (node.point, d2);
        }
        let delta = query[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if delta < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        if let Some(n) = near {
            self.nearest_rec(n, query, best);
        }
        // The far side can still hold an equal-distance point with a lower id,
        // so recurse on == as well.
        if let Some(f) = far {
            if delta * delta <= best.1 {
                self.nearest_rec(f, query, best);
            }
        }
    }

    /// The k nearest points, sorted ascending by (squared distance, id).
    /// Identical to sorting a brute-force scan and taking the first k.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Result<Vec<(usize, f64)>, CoreError> {
        if k == 0 {
            return Err(CoreError::InvalidK("k must be at least 1".into()));
        }
        if k > self.points.len() {
            return Err(CoreError::InvalidK(format!(
                "k = {k} exceeds point count {}",
                self.points.len()
            )));
        }
        // `heap` holds the best k so far; worst candidate at the end.
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut heap);
        Ok(heap.into_iter().map(|(d2, id)| (id, d2)).collect())
    }

    fn knn_rec(&self, node_id: usize, query: [f64; 3], k: usize, heap: &mut Vec<(f64, usize)>) {
        let node = &self.nodes[node_id];
        let d2 = dist2(self.points[node.point], query);
        let cand = (d2, node.point);
        if heap.len() < k || cand < heap[heap.len() - 1] {
            let pos = heap.partition_point(|e| *e < cand);
            heap.insert(pos, cand);
            if heap.len() > k {
                heap.pop();
            }
        }
        let delta = query[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if delta < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        if let Some(n) = near {
            self.knn_rec(n, query, k, heap);
        }
        if let Some(f) = far {
            let bound = if heap.len() < k { f64::INFINITY } else { heap[heap.len() - 1].0 };
            if delta * delta <= bound {
                self.knn_rec(f, query, k, heap);
            }
        }
    }

    /// Ids of all points within squared distance `radius2` of `query`,
    /// ascending by id.
    pub fn within_radius(&self, query: [f64; 3], radius2: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_rec(self.root, query, radius2, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node_id: usize, query: [f64; 3], radius2: f64, out: &mut Vec<usize>) {
        let node = &self.nodes[node_id];
        if dist2(self.points[node.point], query) <= radius2 {
            out.push(node.point);
        }
        let delta = query[node.axis] - self.points[node.point][node.axis];
        let (near, far) = if delta < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        if let Some(n) = near {
            self.radius_rec(n, query, radius2, out);
        }
        if let Some(f) = far {
            if delta * delta <= radius2 {
                self.radius_rec(f, query, radius2, out);
            }
        }
    }
}

/// Symmetric Chamfer distance: the sum of squared nearest-neighbor distances
/// from every point of `p` into `q`, plus the same from `q` into `p`. Sums,
/// not means. Errors when either set is empty.
pub fn chamfer_distance(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64, CoreError> {
    let q_index = SpatialIndex::build(q)?;
    let p_index = SpatialIndex::build(p)?;
    let mut total = 0.0;
    for &point in p {
        total += q_index.nearest(point).1;
    }
    for &point in q {
        total += p_index.nearest(point).1;
    }
    Ok(total)
}

/// Brute-force oracle for [`chamfer_distance`], same arithmetic and summation
/// order. Exposed so test suites elsewhere can compare against it.
pub fn chamfer_distance_brute(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<f64, CoreError> {
    if p.is_empty() || q.is_empty() {
        return Err(CoreError::EmptyIndex);
    }
    let nearest = |sets: (&[[f64; 3]], &[[f64; 3]])| -> f64 {
        let (from, to) = sets;
        from.iter()
            .map(|&a| to.iter().map(|&b| dist2(a, b)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    Ok(nearest((p, q)) + nearest((q, p)))
}
