//! Data-loading factory: context and query pools, the k-d tree over the
//! context pool, and per-query neighbor caches from which input sequences
//! are assembled without further tree queries.

mod kdtree;

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kdtree::KdTree;

/// Stable key of a point across pools, caches, and perturbed copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointId(pub u64);

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One row of geospatial tabular data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: PointId,
    pub u: f64,
    pub v: f64,
    pub x: Vec<f64>,
    pub y: Option<f64>,
}

impl PointRecord {
    pub fn sq_dist_to(&self, other: &PointRecord) -> f64 {
        let du = self.u - other.u;
        let dv = self.v - other.v;
        du * du + dv * dv
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpatialError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("duplicate point id {0}")]
    DuplicateId(PointId),
    #[error("point {0} has non-finite coordinates")]
    NonFiniteCoordinate(PointId),
    #[error("no cached neighbors for point {0}")]
    MissingEntry(PointId),
    #[error("point {id}: need {needed} context neighbors, cache holds {available}")]
    InsufficientNeighbors {
        id: PointId,
        needed: usize,
        available: usize,
    },
    #[error("sequence length must be at least 1")]
    ZeroLength,
}

fn index_ids(points: &[PointRecord]) -> Result<HashMap<PointId, usize>, SpatialError> {
    let mut index = HashMap::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !(p.u.is_finite() && p.v.is_finite()) {
            return Err(SpatialError::NonFiniteCoordinate(p.id));
        }
        if index.insert(p.id, i).is_some() {
            return Err(SpatialError::DuplicateId(p.id));
        }
    }
    Ok(index)
}

/// Observed points that serve as context, indexed by a k-d tree.
#[derive(Debug)]
pub struct ContextPool {
    points: Vec<PointRecord>,
    index: HashMap<PointId, usize>,
    tree: KdTree,
}

impl ContextPool {
    pub fn new(points: Vec<PointRecord>) -> Result<Self, SpatialError> {
        let index = index_ids(&points)?;
        let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.u, p.v)).collect();
        let ids: Vec<PointId> = points.iter().map(|p| p.id).collect();
        let tree = KdTree::build(&coords, &ids)?;
        Ok(Self {
            points,
            index,
            tree,
        })
    }

    pub fn points(&self) -> &[PointRecord] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: PointId) -> Option<&PointRecord> {
        self.index.get(&id).map(|&i| &self.points[i])
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    pub fn knn(&self, u: f64, v: f64, k: usize) -> Vec<Neighbor> {
        self.tree.knn(u, v, k)
    }
}

/// Points to be predicted.
#[derive(Debug, Clone)]
pub struct QueryPool {
    points: Vec<PointRecord>,
    index: HashMap<PointId, usize>,
}

impl QueryPool {
    pub fn new(points: Vec<PointRecord>) -> Result<Self, SpatialError> {
        let index = index_ids(&points)?;
        Ok(Self { points, index })
    }

    pub fn points(&self) -> &[PointRecord] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: PointId) -> Option<&PointRecord> {
        self.index.get(&id).map(|&i| &self.points[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: PointId,
    /// Position in the context pool.
    pub index: usize,
    pub sq_dist: f64,
}

/// Precomputed neighbor lists, one per query id, ascending by distance.
#[derive(Debug, Clone)]
pub struct NeighborCache {
    k: usize,
    entries: HashMap<PointId, Vec<Neighbor>>,
}

impl NeighborCache {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: PointId) -> Option<&[Neighbor]> {
        self.entries.get(&id).map(Vec::as_slice)
    }
}

/// Queries the tree once per query point and stores the `k` nearest
/// context neighbors of each.
pub fn precompute_neighbors(queries: &QueryPool, context: &ContextPool, k: usize) -> NeighborCache {
    let lists: Vec<(PointId, Vec<Neighbor>)> = queries
        .points
        .par_iter()
        .map(|q| (q.id, context.knn(q.u, q.v, k)))
        .collect();
    NeighborCache {
        k,
        entries: lists.into_iter().collect(),
    }
}

/// Number of neighbors to retrieve so that `len − 1` context tokens can be
/// drawn with `expansion` headroom. One extra slot is reserved when the
/// query itself is part of the context pool, since its own entry is dropped
/// during assembly.
pub fn neighbor_budget(len: usize, expansion: f64, query_in_context: bool) -> usize {
    let context = len.saturating_sub(1) as f64;
    (expansion.max(1.0) * context).ceil() as usize + usize::from(query_in_context)
}

/// Builds an input sequence for `target` from its cached neighbors: the
/// target first, followed by a uniformly random subset of `len − 1` cached
/// neighbors kept in ascending-distance order.
pub fn assemble_sequence<R: Rng + ?Sized>(
    target: &PointRecord,
    cache: &NeighborCache,
    context: &ContextPool,
    len: usize,
    rng: &mut R,
) -> Result<Vec<PointRecord>, SpatialError> {
    let entry = cache
        .get(target.id)
        .ok_or(SpatialError::MissingEntry(target.id))?;
    assemble_from_neighbors(target, entry, context, len, rng)
}

/// Like [`assemble_sequence`] but from an explicit neighbor list, as used by
/// the uncached path.
pub fn assemble_from_neighbors<R: Rng + ?Sized>(
    target: &PointRecord,
    neighbors: &[Neighbor],
    context: &ContextPool,
    len: usize,
    rng: &mut R,
) -> Result<Vec<PointRecord>, SpatialError> {
    if len == 0 {
        return Err(SpatialError::ZeroLength);
    }
    let candidates: Vec<&Neighbor> = neighbors.iter().filter(|n| n.id != target.id).collect();
    let needed = len - 1;
    if candidates.len() < needed {
        return Err(SpatialError::InsufficientNeighbors {
            id: target.id,
            needed,
            available: candidates.len(),
        });
    }
    let mut chosen: Vec<usize> = if candidates.len() == needed {
        (0..needed).collect()
    } else {
        rand::seq::index::sample(rng, candidates.len(), needed).into_vec()
    };
    chosen.sort_unstable();

    let mut seq = Vec::with_capacity(len);
    seq.push(target.clone());
    seq.extend(chosen.into_iter().map(|i| context.points[candidates[i].index].clone()));
    Ok(seq)
}
