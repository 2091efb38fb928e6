use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use super::{Neighbor, PointId, SpatialError};

/// Static 2-D k-d tree stored implicitly: the node for the index range
/// `[lo, hi)` is the median element `(lo + hi) / 2`, splitting on `u` at
/// even depth and `v` at odd depth.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<TreePoint>,
    queries: AtomicU64,
}

#[derive(Debug, Clone, Copy)]
struct TreePoint {
    coord: [f64; 2],
    id: PointId,
    /// Position of the point in the owning pool.
    index: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    sq_dist: f64,
    id: PointId,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq_dist
            .total_cmp(&other.sq_dist)
            .then(self.id.cmp(&other.id))
    }
}

impl KdTree {
    /// Builds a balanced tree; `coords[i]` belongs to `ids[i]`.
    pub fn build(coords: &[(f64, f64)], ids: &[PointId]) -> Result<Self, SpatialError> {
        if coords.is_empty() {
            return Err(SpatialError::EmptyPool);
        }
        debug_assert_eq!(coords.len(), ids.len());
        let mut points: Vec<TreePoint> = coords
            .iter()
            .zip(ids)
            .enumerate()
            .map(|(index, (&(u, v), &id))| TreePoint {
                coord: [u, v],
                id,
                index,
            })
            .collect();
        split(&mut points, 0);
        Ok(Self {
            points,
            queries: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of levels in the tree.
    pub fn depth(&self) -> usize {
        fn level(lo: usize, hi: usize) -> usize {
            if lo >= hi {
                return 0;
            }
            let mid = (lo + hi) / 2;
            1 + level(lo, mid).max(level(mid + 1, hi))
        }
        level(0, self.points.len())
    }

    /// The `k` nearest points to `(u, v)`, ascending by squared distance with
    /// ties broken by smaller id. `k` larger than the tree returns every point.
    pub fn knn(&self, u: f64, v: f64, k: usize) -> Vec<Neighbor> {
        self.queries.fetch_add(1, AtomicOrdering::Relaxed);
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.points.len(), 0, [u, v], k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                index: c.index,
                sq_dist: c.sq_dist,
            })
            .collect()
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        depth: usize,
        q: [f64; 2],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = &self.points[mid];
        let du = p.coord[0] - q[0];
        let dv = p.coord[1] - q[1];
        let cand = Candidate {
            sq_dist: du * du + dv * dv,
            id: p.id,
            index: p.index,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if heap.peek().is_some_and(|worst| cand < *worst) {
            heap.pop();
            heap.push(cand);
        }

        let axis = depth % 2;
        let diff = q[axis] - p.coord[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, depth + 1, q, k, heap);
        // `<=` keeps equal-distance points reachable for id tie-breaking.
        let visit_far = heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.sq_dist);
        if visit_far {
            self.search(far.0, far.1, depth + 1, q, k, heap);
        }
    }

    /// Total `knn` calls made against this tree.
    pub fn query_count(&self) -> u64 {
        self.queries.load(AtomicOrdering::Relaxed)
    }

    pub fn reset_query_count(&self) {
        self.queries.store(0, AtomicOrdering::Relaxed);
    }
}

fn split(points: &mut [TreePoint], depth: usize) {
    if points.len() <= 1 {
        return;
    }
    let axis = depth % 2;
    let mid = points.len() / 2;
    points.select_nth_unstable_by(mid, |a, b| {
        a.coord[axis]
            .total_cmp(&b.coord[axis])
            .then(a.id.cmp(&b.id))
    });
    let (left, right) = points.split_at_mut(mid);
    split(left, depth + 1);
    split(&mut right[1..], depth + 1);
}
